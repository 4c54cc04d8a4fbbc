//! Deterministic synthetic rooms: axis-aligned furniture boxes on a floor
//! plane, rasterized to colored points, with template questions whose answers
//! are computed from the boxes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    derive_seed, manifest_path, vocab_path, DatasetManifest, ManifestHeader, QaItem, SceneRecord, TaskTag,
    MANIFEST_VERSION, VIEWER_CONVENTION,
};
use crate::error::{Error, Result};
use crate::pointcloud::{io::write_cloud, AxisAlignedBox, Point3, PointCloud};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub plural: String,
    pub min_half_extent: Point3,
    pub max_half_extent: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// The floor spans `[-x, x] × [-y, y]` at `z = 0`.
    pub room_half_extent: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    pub categories: Vec<CategorySpec>,
    pub colors: Vec<ColorSpec>,
    pub points_per_object: usize,
    pub floor_points: usize,
    /// Standard deviation of the Gaussian jitter added to every point.
    pub jitter: f64,
    /// Minimum clearance between boxes.
    pub min_gap: f64,
    pub placement_retries: usize,
}

fn category(name: &str, plural: &str, lo: Point3, hi: Point3) -> CategorySpec {
    CategorySpec {
        name: name.into(),
        plural: plural.into(),
        min_half_extent: lo,
        max_half_extent: hi,
    }
}

fn color(name: &str, rgb: Point3) -> ColorSpec {
    ColorSpec { name: name.into(), rgb }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_half_extent: [2.0, 2.0],
            min_objects: 2,
            max_objects: 5,
            categories: vec![
                category("chair", "chairs", [0.2, 0.2, 0.4], [0.25, 0.25, 0.5]),
                category("table", "tables", [0.5, 0.35, 0.35], [0.7, 0.45, 0.4]),
                category("lamp", "lamps", [0.1, 0.1, 0.6], [0.15, 0.15, 0.8]),
                category("box", "boxes", [0.15, 0.15, 0.15], [0.25, 0.25, 0.25]),
                category("sofa", "sofas", [0.8, 0.35, 0.4], [1.0, 0.45, 0.45]),
            ],
            colors: vec![
                color("red", [0.85, 0.15, 0.15]),
                color("green", [0.2, 0.7, 0.2]),
                color("blue", [0.2, 0.3, 0.85]),
                color("yellow", [0.9, 0.85, 0.2]),
                color("white", [0.92, 0.92, 0.92]),
                color("black", [0.1, 0.1, 0.1]),
            ],
            points_per_object: 256,
            floor_points: 1024,
            jitter: 0.005,
            min_gap: 0.05,
            placement_retries: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("{field}: {msg}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(
                "min_objects",
                format!("object count range {}..={} must start at 1 or more", self.min_objects, self.max_objects),
            );
        }
        if self.max_objects > NUMBER_WORDS.len() - 1 {
            return bad("max_objects", format!("at most {} objects supported", NUMBER_WORDS.len() - 1));
        }
        if self.categories.is_empty() {
            return bad("categories", "palette is empty".into());
        }
        if self.colors.is_empty() {
            return bad("colors", "palette is empty".into());
        }
        if !(self.room_half_extent.iter().all(|v| *v > 0.0)) {
            return bad("room_half_extent", "must be positive".into());
        }
        let mut names = std::collections::HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.name.is_empty() || c.plural.is_empty() || !names.insert(c.name.as_str()) {
                return bad(&format!("categories[{i}].name"), format!("empty or duplicate name {:?}", c.name));
            }
            for k in 0..3 {
                if !(c.min_half_extent[k] > 0.0 && c.min_half_extent[k] <= c.max_half_extent[k]) {
                    return bad(
                        &format!("categories[{i}].min_half_extent"),
                        "extents must be positive and not exceed the maximum".into(),
                    );
                }
            }
            if (0..2).any(|k| c.max_half_extent[k] >= self.room_half_extent[k]) {
                return bad(&format!("categories[{i}].max_half_extent"), "object does not fit in the room".into());
            }
        }
        let mut cnames = std::collections::HashSet::new();
        for (i, c) in self.colors.iter().enumerate() {
            if c.name.is_empty() || !cnames.insert(c.name.as_str()) {
                return bad(&format!("colors[{i}].name"), format!("empty or duplicate name {:?}", c.name));
            }
            if c.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(&format!("colors[{i}].rgb"), "components must lie in [0, 1]".into());
            }
        }
        if self.points_per_object == 0 || self.jitter < 0.0 || !self.jitter.is_finite() {
            return bad("points_per_object", "needs at least one point per object and finite jitter".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable config")))
    }

    /// Loads a config from JSON, reporting the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("scene config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

pub fn number_word(n: usize) -> &'static str {
    NUMBER_WORDS[n]
}

/// Corners of the floor, front being the camera side (`-y`).
pub const CORNERS: [(&str, f64, f64); 4] = [
    ("front left", -1.0, -1.0),
    ("front right", 1.0, -1.0),
    ("back left", -1.0, 1.0),
    ("back right", 1.0, 1.0),
];

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub record: SceneRecord,
    pub cloud: PointCloud,
    /// Fewer objects than requested could be placed.
    pub reduced: bool,
}

/// Scene geometry helpers shared by the templates.
pub mod geometry {
    use super::*;

    pub fn category_name(cfg: &SceneConfig, b: &AxisAlignedBox) -> String {
        cfg.categories[b.category as usize].name.clone()
    }

    pub fn describe(cfg: &SceneConfig, b: &AxisAlignedBox) -> String {
        format!("{} {}", cfg.colors[b.color as usize].name, cfg.categories[b.category as usize].name)
    }

    /// `"left"` when `a` is further toward `-x` than `b`.
    pub fn left_right(a: &AxisAlignedBox, b: &AxisAlignedBox) -> &'static str {
        if a.center[0] < b.center[0] {
            "left"
        } else {
            "right"
        }
    }

    /// `"in front"` when `a` is nearer the camera (`-y`) than `b`.
    pub fn front_behind(a: &AxisAlignedBox, b: &AxisAlignedBox) -> &'static str {
        if a.center[1] < b.center[1] {
            "in front"
        } else {
            "behind"
        }
    }

    pub fn region(b: &AxisAlignedBox) -> &'static str {
        match (b.center[1] < 0.0, b.center[0] < 0.0) {
            (true, true) => "front left",
            (true, false) => "front right",
            (false, true) => "back left",
            (false, false) => "back right",
        }
    }

    fn argmin(boxes: &[AxisAlignedBox], skip: Option<usize>, dist: impl Fn(&AxisAlignedBox) -> f64) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, b) in boxes.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let d = dist(b);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Box whose center is closest (in the floor plane) to the given corner.
    pub fn nearest_to_corner(cfg: &SceneConfig, boxes: &[AxisAlignedBox], sx: f64, sy: f64) -> Option<usize> {
        let (cx, cy) = (sx * cfg.room_half_extent[0], sy * cfg.room_half_extent[1]);
        argmin(boxes, None, |b| (b.center[0] - cx).powi(2) + (b.center[1] - cy).powi(2))
    }

    pub fn nearest_other(boxes: &[AxisAlignedBox], i: usize) -> Option<usize> {
        let c = boxes[i].center;
        argmin(boxes, Some(i), |b| crate::pointcloud::squared_distance(b.center, c))
    }

    pub fn count(boxes: &[AxisAlignedBox], category: u32) -> usize {
        boxes.iter().filter(|b| b.category == category).count()
    }

    /// Boxes whose color + category description is unique in the scene.
    pub fn uniquely_described(cfg: &SceneConfig, boxes: &[AxisAlignedBox]) -> Vec<usize> {
        (0..boxes.len())
            .filter(|&i| {
                boxes
                    .iter()
                    .filter(|b| describe(cfg, b) == describe(cfg, &boxes[i]))
                    .count()
                    == 1
            })
            .collect()
    }

    pub fn scene_caption(cfg: &SceneConfig, boxes: &[AxisAlignedBox]) -> String {
        let mut counts: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for b in boxes {
            let c = &cfg.categories[b.category as usize];
            counts.entry(c.name.as_str()).or_insert((0, c.plural.as_str())).0 += 1;
        }
        let parts: Vec<String> = counts
            .iter()
            .map(|(name, (n, plural))| format!("{} {}", number_word(*n), if *n == 1 { name } else { plural }))
            .collect();
        let list = match parts.len() {
            0 => "nothing".to_string(),
            1 => parts[0].clone(),
            n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
        };
        format!("a room with {list}.")
    }
}

use geometry::*;

fn uniform3(rng: &mut impl Rng, lo: Point3, hi: Point3) -> Point3 {
    [0, 1, 2].map(|k| if lo[k] < hi[k] { rng.random_range(lo[k]..=hi[k]) } else { lo[k] })
}

fn place_boxes(cfg: &SceneConfig, rng: &mut impl Rng) -> (Vec<AxisAlignedBox>, bool) {
    let want = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<AxisAlignedBox> = Vec::with_capacity(want);
    let mut reduced = false;
    for _ in 0..want {
        let mut placed = false;
        for _ in 0..cfg.placement_retries.max(1) {
            let cat = rng.random_range(0..cfg.categories.len());
            let col = rng.random_range(0..cfg.colors.len());
            let spec = &cfg.categories[cat];
            let h = uniform3(rng, spec.min_half_extent, spec.max_half_extent);
            let cx = rng.random_range(-(cfg.room_half_extent[0] - h[0])..=(cfg.room_half_extent[0] - h[0]));
            let cy = rng.random_range(-(cfg.room_half_extent[1] - h[1])..=(cfg.room_half_extent[1] - h[1]));
            let b = AxisAlignedBox {
                center: [cx, cy, h[2]],
                half_extent: h,
                category: cat as u32,
                color: col as u32,
            };
            if boxes.iter().all(|o| !o.overlaps(&b, cfg.min_gap)) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            reduced = true;
            break;
        }
    }
    (boxes, reduced)
}

/// Uniform samples on the top and four side faces of a box.
fn surface_points(b: &AxisAlignedBox, n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let [hx, hy, hz] = b.half_extent;
    let areas = [hx * hy, hy * hz, hy * hz, hx * hz, hx * hz];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut r = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 4 && r >= areas[face] {
                r -= areas[face];
                face += 1;
            }
            let u: f64 = rng.random_range(-1.0..=1.0);
            let v: f64 = rng.random_range(-1.0..=1.0);
            let local = match face {
                0 => [u * hx, v * hy, hz],
                1 => [-hx, u * hy, v * hz],
                2 => [hx, u * hy, v * hz],
                3 => [u * hx, -hy, v * hz],
                _ => [u * hx, hy, v * hz],
            };
            [0, 1, 2].map(|k| b.center[k] + local[k])
        })
        .collect()
}

fn quantize_color(rgb: Point3) -> Point3 {
    rgb.map(|v| (v * 255.0).round() / 255.0)
}

fn build_qa(cfg: &SceneConfig, boxes: &[AxisAlignedBox], scene_id: &str, rng: &mut impl Rng) -> Vec<QaItem> {
    let mut items: Vec<(String, String, TaskTag, &'static str)> = Vec::new();
    let present: Vec<u32> = {
        let mut v: Vec<u32> = boxes.iter().map(|b| b.category).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let all_cats: Vec<u32> = (0..cfg.categories.len() as u32).collect();

    if let Some(&c) = present.choose(rng) {
        let spec = &cfg.categories[c as usize];
        items.push((
            format!("how many {} are there?", spec.plural),
            number_word(count(boxes, c)).to_string(),
            TaskTag::Qa,
            "count",
        ));
    }
    if let Some(&c) = all_cats.choose(rng) {
        let spec = &cfg.categories[c as usize];
        items.push((
            format!("how many {} are there?", spec.plural),
            number_word(count(boxes, c)).to_string(),
            TaskTag::Qa,
            "count",
        ));
        items.push((
            format!("is there a {} in the room?", spec.name),
            if count(boxes, c) > 0 { "yes" } else { "no" }.to_string(),
            TaskTag::Qa,
            "existence",
        ));
    }
    let singles: Vec<u32> = present.iter().copied().filter(|&c| count(boxes, c) == 1).collect();
    if let Some(&c) = singles.choose(rng) {
        let b = boxes.iter().find(|b| b.category == c).expect("present category");
        items.push((
            format!("what color is the {}?", cfg.categories[c as usize].name),
            cfg.colors[b.color as usize].name.clone(),
            TaskTag::Qa,
            "color",
        ));
    }
    let (corner, sx, sy) = *CORNERS.choose(rng).expect("four corners");
    if let Some(i) = nearest_to_corner(cfg, boxes, sx, sy) {
        items.push((
            format!("what is closest to the {corner} corner?"),
            format!("the {}", describe(cfg, &boxes[i])),
            TaskTag::Qa,
            "location",
        ));
    }
    let unique = uniquely_described(cfg, boxes);
    if unique.len() >= 2 {
        let pick: Vec<usize> = unique.choose_multiple(rng, 2).copied().collect();
        let (a, b) = (&boxes[pick[0]], &boxes[pick[1]]);
        items.push((
            format!("is the {} to the left or right of the {}?", describe(cfg, a), describe(cfg, b)),
            left_right(a, b).to_string(),
            TaskTag::Qa,
            "relation_lr",
        ));
        let pick: Vec<usize> = unique.choose_multiple(rng, 2).copied().collect();
        let (a, b) = (&boxes[pick[0]], &boxes[pick[1]]);
        items.push((
            format!("is the {} in front of or behind the {}?", describe(cfg, a), describe(cfg, b)),
            front_behind(a, b).to_string(),
            TaskTag::Qa,
            "relation_fb",
        ));
    }
    if let Some(&i) = unique.choose(rng) {
        let b = &boxes[i];
        items.push((
            format!("describe the {}.", describe(cfg, b)),
            format!("a {} in the {} of the room.", describe(cfg, b), region(b)),
            TaskTag::DenseCaption,
            "dense_caption",
        ));
        if let Some(j) = nearest_other(boxes, i) {
            items.push((
                format!("what is the nearest object to the {}?", describe(cfg, b)),
                format!("the {}", describe(cfg, &boxes[j])),
                TaskTag::Dialogue,
                "dialogue",
            ));
        }
    }
    items.push((
        "describe the scene.".to_string(),
        scene_caption(cfg, boxes),
        TaskTag::SceneCaption,
        "scene_caption",
    ));
    items
        .into_iter()
        .enumerate()
        .map(|(k, (instruction, answer, task, template))| QaItem {
            id: format!("{scene_id}-{k:02}"),
            instruction,
            answers: vec![answer],
            task,
            template: template.to_string(),
        })
        .collect()
}

/// Generates one scene. Coordinates are rounded to `f32` and colors to 8 bits
/// so the in-memory cloud equals what a PLY round trip returns.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, scene_id: &str) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (boxes, reduced) = place_boxes(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.jitter.max(f64::MIN_POSITIVE)).map_err(|e| Error::config(e.to_string()))?;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..cfg.floor_points {
        let x = rng.random_range(-cfg.room_half_extent[0]..=cfg.room_half_extent[0]);
        let y = rng.random_range(-cfg.room_half_extent[1]..=cfg.room_half_extent[1]);
        points.push([x, y, 0.0]);
        colors.push(quantize_color([0.5, 0.5, 0.5]));
    }
    for b in &boxes {
        let rgb = quantize_color(cfg.colors[b.color as usize].rgb);
        for p in surface_points(b, cfg.points_per_object, &mut rng) {
            points.push(p);
            colors.push(rgb);
        }
    }
    if cfg.jitter > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    for p in &mut points {
        *p = p.map(|v| v as f32 as f64);
    }
    let cloud = PointCloud::new(points, Some(colors))?;
    let qa = build_qa(cfg, &boxes, scene_id, &mut rng);
    Ok(GeneratedScene {
        record: SceneRecord {
            scene_id: scene_id.to_string(),
            cloud: format!("clouds/{scene_id}.ply"),
            boxes,
            qa,
        },
        cloud,
        reduced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1 }
    }
}

impl SplitPlan {
    /// Scene counts for train/val/test.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((n as f64) * self.train).round() as usize;
        let val = (((n as f64) * self.val).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        [train, val, n - train - val]
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Generates `n_scenes` scenes with seeds `derive_seed(seed, i)`, writes the
/// clouds, one manifest per split and the vocabulary under `root`.
pub fn generate_dataset(root: &Path, seed: u64, n_scenes: usize, cfg: &SceneConfig, plan: SplitPlan) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let clouds_dir = root.join("clouds");
    std::fs::create_dir_all(&clouds_dir).map_err(|e| Error::io(&clouds_dir, e))?;
    let counts = plan.counts(n_scenes);
    let mut manifests = Vec::new();
    let mut index = 0usize;
    for (split, &n) in SPLITS.iter().zip(&counts) {
        let mut header = ManifestHeader {
            version: MANIFEST_VERSION,
            split: split.to_string(),
            source: "synthetic".into(),
            seed: Some(seed),
            config_hash: Some(cfg.hash()),
            convention: VIEWER_CONVENTION.into(),
            reduced: vec![],
            skipped: vec![],
            warnings: vec![],
            labels: vec![],
        };
        let mut scenes = Vec::with_capacity(n);
        for _ in 0..n {
            let id = format!("scene{index:05}");
            let s = generate_scene(derive_seed(seed, index as u64), cfg, &id)?;
            write_cloud(root.join(&s.record.cloud), &s.cloud)?;
            if s.reduced {
                header.reduced.push(id);
            }
            scenes.push(s.record);
            index += 1;
        }
        let m = DatasetManifest { header, scenes };
        m.save(&manifest_path(root, split))?;
        manifests.push(m);
    }
    let vocab = Vocabulary::build(manifests.iter().flat_map(|m| m.texts()));
    vocab.save(&vocab_path(root))?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = generate_scene(11, &cfg, "s").unwrap();
        let b = generate_scene(11, &cfg, "s").unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.cloud, b.cloud);
        let c = generate_scene(12, &cfg, "s").unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn boxes_do_not_overlap_and_sit_on_the_floor() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg, "s").unwrap();
            let b = &s.record.boxes;
            assert!(!b.is_empty());
            for i in 0..b.len() {
                assert_eq!(b[i].center[2], b[i].half_extent[2]);
                for j in i + 1..b.len() {
                    assert!(!b[i].overlaps(&b[j], cfg.min_gap));
                }
            }
            let expected = cfg.floor_points + b.len() * cfg.points_per_object;
            assert_eq!(s.cloud.len(), expected);
        }
    }

    #[test]
    fn invalid_palettes_name_the_field() {
        let mut cfg = SceneConfig::default();
        cfg.colors[1].rgb = [2.0, 0.0, 0.0];
        assert!(cfg.validate().unwrap_err().to_string().contains("colors[1].rgb"));
        let cfg = SceneConfig {
            min_objects: 0,
            ..SceneConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("min_objects"));
    }

    #[test]
    fn scene_caption_lists_categories() {
        let cfg = SceneConfig::default();
        let b = |cat| AxisAlignedBox::new([0.0; 3], [0.1; 3], cat, 0).unwrap();
        assert_eq!(scene_caption(&cfg, &[b(0), b(1), b(0)]), "a room with two chairs and one table.");
        assert_eq!(
            scene_caption(&cfg, &[b(3), b(0), b(2)]),
            "a room with one box, one chair and one lamp."
        );
    }

    #[test]
    fn split_counts_cover_every_scene() {
        assert_eq!(SplitPlan::default().counts(32), [26, 3, 3]);
        assert_eq!(SplitPlan::default().counts(1), [1, 0, 0]);
        assert_eq!(SplitPlan { train: 1.0, val: 0.0 }.counts(5), [5, 0, 0]);
    }
}
