use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::registry::{CategoryId, CategoryRegistry};
use crate::error::{contract, Error, Result};
use crate::mask::{connected_components, BBox, Mask};
use crate::nn::Tensor;
use crate::rng;

/// RGB raster with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl SceneImage {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        contract!(
            pixels.len() == height * width * 3,
            "expected {} pixel values, got {}",
            height * width * 3,
            pixels.len()
        );
        contract!(
            pixels.iter().all(|v| (0.0..=1.0).contains(v)),
            "pixel values must lie in [0, 1]"
        );
        Ok(SceneImage {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn from_rgb8(id: impl Into<String>, height: usize, width: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), height * width * 3);
        SceneImage {
            id: id.into(),
            height,
            width,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Channel-major `[3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = self.pixels[p * 3 + c];
            }
        }
        Tensor::new(&[3, self.height, self.width], data)
    }
}

/// Weak supervision: which object and relation categories occur, nothing more.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageLevelLabels {
    pub objects: BTreeSet<CategoryId>,
    pub relations: BTreeSet<CategoryId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtInstance {
    pub category: CategoryId,
    pub mask: Mask,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: usize,
    pub relation: CategoryId,
    pub object: usize,
}

/// Everything the generator knows but training must never see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenGroundTruth {
    pub instances: Vec<GtInstance>,
    pub triplets: Vec<Triplet>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image: SceneImage,
    pub labels: ImageLevelLabels,
    pub hidden: HiddenGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Bar,
}

impl ShapeKind {
    /// Does the shape centred at `(cx, cy)` with radius `r` cover point `(px, py)`?
    pub fn covers(self, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Cross => {
                (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r)
            }
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.45 * r,
            ShapeKind::Triangle => {
                // apex (0, -r), base corners (±r, 0.8r)
                let base = dy <= 0.8 * r;
                let left = 1.8 * dx + dy >= -r - 1e-12;
                let right = -1.8 * dx + dy >= -r - 1e-12;
                base && left && right
            }
        }
    }

    /// Point farthest from the boundary, relative to the nominal centre.
    fn interior_offset(self, r: f64) -> f64 {
        match self {
            ShapeKind::Triangle => 0.21 * r,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationRule {
    LeftOf,
    Above,
    Inside,
    Overlapping,
}

impl RelationRule {
    pub fn name(self) -> &'static str {
        match self {
            RelationRule::LeftOf => "left of",
            RelationRule::Above => "above",
            RelationRule::Inside => "inside",
            RelationRule::Overlapping => "overlapping",
        }
    }

    pub const ALL: [RelationRule; 4] = [
        RelationRule::LeftOf,
        RelationRule::Above,
        RelationRule::Inside,
        RelationRule::Overlapping,
    ];
}

/// Settings of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub palette: Vec<ObjectStyle>,
    pub max_objects: usize,
    pub relations: Vec<RelationRule>,
    /// Radius range of freely placed and overlapping objects.
    pub radius: [f64; 2],
    /// Radius range of containers in nested layouts.
    pub outer_radius: [f64; 2],
    /// Minimum bounding-box gap between freely placed objects.
    pub min_gap: usize,
    pub p_inside: f64,
    pub p_overlap: f64,
    pub background: [u8; 3],
    pub min_visible_area: usize,
}

pub fn default_palette() -> Vec<ObjectStyle> {
    let s = |name: &str, shape, color| ObjectStyle {
        name: name.into(),
        shape,
        color,
    };
    vec![
        s("circle", ShapeKind::Circle, [220, 40, 40]),
        s("square", ShapeKind::Square, [40, 200, 60]),
        s("triangle", ShapeKind::Triangle, [50, 90, 230]),
        s("diamond", ShapeKind::Diamond, [230, 210, 40]),
        s("cross", ShapeKind::Cross, [210, 60, 210]),
        s("bar", ShapeKind::Bar, [40, 210, 210]),
    ]
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            palette: default_palette(),
            max_objects: 3,
            relations: RelationRule::ALL.to_vec(),
            radius: [7.0, 11.0],
            outer_radius: [12.0, 15.0],
            min_gap: 6,
            p_inside: 0.25,
            p_overlap: 0.25,
            background: [24, 24, 24],
            min_visible_area: 24,
        }
    }
}

impl GeneratorConfig {
    /// Default settings restricted to the first `n` palette entries.
    pub fn with_categories(n: usize) -> Self {
        let mut c = GeneratorConfig::default();
        c.palette.truncate(n);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.palette.is_empty() {
            return fail("generator needs at least one object category".into());
        }
        if self.max_objects < 1 {
            return fail("max_objects must be at least 1".into());
        }
        let largest = self.radius[1].max(self.outer_radius[1]);
        if self.radius[0] <= 0.0 || self.radius[0] > self.radius[1] || self.outer_radius[0] > self.outer_radius[1] {
            return fail("radius ranges must be positive and ordered".into());
        }
        if 2.0 * largest + 2.0 > self.height.min(self.width) as f64 {
            return fail(format!("objects of radius {largest} do not fit a {}x{} image", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.p_inside) || !(0.0..=1.0).contains(&self.p_overlap) {
            return fail("layout probabilities must lie in [0, 1]".into());
        }
        if self.palette.iter().any(|s| s.color == self.background) {
            return fail("an object colour equals the background colour".into());
        }
        for (i, a) in self.palette.iter().enumerate() {
            if self.palette[..i].iter().any(|b| b.color == a.color) {
                return fail(format!("colour of {:?} is not unique", a.name));
            }
        }
        let mut seen = BTreeSet::new();
        if !self.relations.iter().all(|r| seen.insert(*r)) {
            return fail("relation rules listed twice".into());
        }
        Ok(())
    }

    pub fn object_registry(&self) -> Result<CategoryRegistry> {
        CategoryRegistry::new(self.palette.iter().map(|s| s.name.clone()))
    }

    pub fn relation_registry(&self) -> Result<CategoryRegistry> {
        CategoryRegistry::new(self.relations.iter().map(|r| r.name()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    category: CategoryId,
    cx: f64,
    cy: f64,
    r: f64,
}

fn rasterize(config: &GeneratorConfig, p: &Placement) -> Mask {
    let shape = config.palette[p.category].shape;
    let mut m = Mask::empty(config.height, config.width);
    let y_lo = (p.cy - p.r - 1.0).floor().max(0.0) as usize;
    let y_hi = ((p.cy + p.r + 1.0).ceil() as usize).min(config.height);
    let x_lo = (p.cx - p.r - 1.0).floor().max(0.0) as usize;
    let x_hi = ((p.cx + p.r + 1.0).ceil() as usize).min(config.width);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if shape.covers(p.cx, p.cy, p.r, x as f64 + 0.5, y as f64 + 0.5) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn fits(config: &GeneratorConfig, cx: f64, cy: f64, r: f64) -> bool {
    cx - r >= 1.0 && cy - r >= 1.0 && cx + r <= config.width as f64 - 1.0 && cy + r <= config.height as f64 - 1.0
}

fn random_centre<R: Rng>(config: &GeneratorConfig, r: f64, rng: &mut R) -> (f64, f64) {
    let cx = rng.gen_range(r + 1.0..=config.width as f64 - 1.0 - r);
    let cy = rng.gen_range(r + 1.0..=config.height as f64 - 1.0 - r);
    (cx, cy)
}

/// Pairwise relations implied by visible masks. Rules are tried in the order
/// inside, overlapping, left of, above; disabled rules are skipped.
pub fn derive_relations(
    instances: &[(CategoryId, Mask)],
    rules: &[RelationRule],
    relations: &CategoryRegistry,
) -> Vec<Triplet> {
    let id = |r: RelationRule| {
        if rules.contains(&r) {
            relations.id(r.name())
        } else {
            None
        }
    };
    let boxes: Vec<BBox> = instances.iter().map(|(_, m)| m.bbox().expect("non-empty mask")).collect();
    let mut out = Vec::new();
    for i in 0..instances.len() {
        for j in 0..instances.len() {
            if i == j {
                continue;
            }
            let (a, b) = (&boxes[i], &boxes[j]);
            if a.strictly_inside(b) {
                if let Some(r) = id(RelationRule::Inside) {
                    out.push(Triplet { subject: i, relation: r, object: j });
                    continue;
                }
            }
            if b.strictly_inside(a) && id(RelationRule::Inside).is_some() {
                continue;
            }
            if instances[i].1.touches(&instances[j].1) {
                if let Some(r) = id(RelationRule::Overlapping) {
                    if i < j {
                        out.push(Triplet { subject: i, relation: r, object: j });
                    }
                    continue;
                }
            }
            if a.x1 < b.x0 && a.rows_overlap(b) {
                if let Some(r) = id(RelationRule::LeftOf) {
                    out.push(Triplet { subject: i, relation: r, object: j });
                    continue;
                }
            }
            if a.y1 < b.y0 && a.cols_overlap(b) {
                if let Some(r) = id(RelationRule::Above) {
                    out.push(Triplet { subject: i, relation: r, object: j });
                }
            }
        }
    }
    out
}

/// Template captions describing a scene's instances and triplets.
pub fn describe(
    categories: &[CategoryId],
    triplets: &[Triplet],
    objects: &CategoryRegistry,
    relations: &CategoryRegistry,
) -> Vec<String> {
    let name = |c: CategoryId| objects.name(c).unwrap_or("?");
    let mut caps: Vec<String> = Vec::new();
    let mut push = |s: String| {
        if !caps.contains(&s) {
            caps.push(s);
        }
    };
    if triplets.is_empty() {
        match categories.len() {
            0 => {}
            1 => push(format!("a {}", name(categories[0]))),
            n => {
                for i in 0..n {
                    for j in i + 1..n {
                        push(format!("a {} and a {}", name(categories[i]), name(categories[j])));
                    }
                }
            }
        }
    } else {
        for t in triplets {
            push(format!(
                "a {} {} a {}",
                name(categories[t.subject]),
                relations.name(t.relation).unwrap_or("?"),
                name(categories[t.object])
            ));
        }
    }
    caps
}

enum Layout {
    Free,
    Nested,
    Overlap,
}

fn try_layout<R: Rng>(config: &GeneratorConfig, k: usize, rng: &mut R) -> Option<Vec<Placement>> {
    let n_cat = config.palette.len();
    let has = |r| config.relations.contains(&r);
    let u: f64 = rng.gen();
    let layout = if k >= 2 && n_cat >= 2 && has(RelationRule::Inside) && u < config.p_inside {
        Layout::Nested
    } else if k >= 2 && n_cat >= 2 && has(RelationRule::Overlapping) && u < config.p_inside + config.p_overlap {
        Layout::Overlap
    } else {
        Layout::Free
    };
    let mut placed: Vec<Placement> = Vec::new();
    let mut masks: Vec<Mask> = Vec::new();
    match layout {
        Layout::Nested => {
            let outer_cat = rng.gen_range(0..n_cat);
            let inner_cat = (outer_cat + rng.gen_range(1..n_cat)) % n_cat;
            let r = rng.gen_range(config.outer_radius[0]..=config.outer_radius[1]);
            let (cx, cy) = random_centre(config, r, rng);
            let ri = r * rng.gen_range(0.25..0.4);
            let outer = Placement { category: outer_cat, cx, cy, r };
            let inner = Placement {
                category: inner_cat,
                cx,
                cy: cy + config.palette[outer_cat].shape.interior_offset(r),
                r: ri,
            };
            let (mo, mi) = (rasterize(config, &outer), rasterize(config, &inner));
            if mi.area() < config.min_visible_area || mi.intersection(&mo) != mi.area() {
                return None;
            }
            placed.extend([outer, inner]);
            masks.extend([mo, mi]);
        }
        Layout::Overlap => {
            let a_cat = rng.gen_range(0..n_cat);
            let b_cat = (a_cat + rng.gen_range(1..n_cat)) % n_cat;
            let ra = rng.gen_range(config.radius[0]..=config.radius[1]);
            let rb = rng.gen_range(config.radius[0]..=config.radius[1]);
            let (cx, cy) = random_centre(config, ra, rng);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = (ra + rb) * rng.gen_range(0.55..0.85);
            let (bx, by) = (cx + d * theta.cos(), cy + d * theta.sin());
            if !fits(config, bx, by, rb) {
                return None;
            }
            let a = Placement { category: a_cat, cx, cy, r: ra };
            let b = Placement { category: b_cat, cx: bx, cy: by, r: rb };
            masks.extend([rasterize(config, &a), rasterize(config, &b)]);
            placed.extend([a, b]);
        }
        Layout::Free => {}
    }
    while placed.len() < k {
        let mut ok = false;
        for _ in 0..60 {
            let cat = rng.gen_range(0..n_cat);
            let r = rng.gen_range(config.radius[0]..=config.radius[1]);
            let (cx, cy) = random_centre(config, r, rng);
            let p = Placement { category: cat, cx, cy, r };
            let m = rasterize(config, &p);
            let bb = m.bbox()?;
            if masks.iter().all(|o| o.bbox().is_some_and(|ob| ob.gap(&bb) >= config.min_gap)) {
                placed.push(p);
                masks.push(m);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// Render a random scene. Deterministic in `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneRecord> {
    generate_scene_with_id(seed, config, format!("scene-{seed:016x}"))
}

pub fn generate_scene_with_id(seed: u64, config: &GeneratorConfig, id: String) -> Result<SceneRecord> {
    config.validate()?;
    let objects = config.object_registry()?;
    let relations = config.relation_registry()?;
    let mut rng = rng::stream(seed, "scene", 0);
    let (h, w) = (config.height, config.width);
    for _attempt in 0..500 {
        let k = rng.gen_range(1..=config.max_objects);
        let Some(placed) = try_layout(config, k, &mut rng) else {
            continue;
        };
        // Paint in order; later objects occlude earlier ones.
        let mut owner = vec![usize::MAX; h * w];
        let full: Vec<Mask> = placed.iter().map(|p| rasterize(config, p)).collect();
        for (i, m) in full.iter().enumerate() {
            for (o, &b) in owner.iter_mut().zip(m.bits()) {
                if b {
                    *o = i;
                }
            }
        }
        let visible: Vec<Mask> = (0..placed.len())
            .map(|i| Mask::from_bits(h, w, owner.iter().map(|&o| o == i).collect()))
            .collect();
        let legible = visible
            .iter()
            .zip(&full)
            .all(|(v, f)| {
                v.area() >= config.min_visible_area && 2 * v.area() >= f.area() && connected_components(v).len() == 1
            });
        if !legible {
            continue;
        }
        let same_touch = (0..placed.len()).any(|i| {
            (0..i).any(|j| placed[i].category == placed[j].category && visible[i].touches(&visible[j]))
        });
        if same_touch {
            continue;
        }
        let inst: Vec<(CategoryId, Mask)> = placed.iter().map(|p| p.category).zip(visible).collect();
        let triplets = derive_relations(&inst, &config.relations, &relations);
        let categories: Vec<CategoryId> = inst.iter().map(|(c, _)| *c).collect();
        let captions = describe(&categories, &triplets, &objects, &relations);

        let mut bytes = Vec::with_capacity(h * w * 3);
        for &o in &owner {
            let c = if o == usize::MAX {
                config.background
            } else {
                config.palette[placed[o].category].color
            };
            bytes.extend_from_slice(&c);
        }
        let labels = ImageLevelLabels {
            objects: categories.iter().copied().collect(),
            relations: triplets.iter().map(|t| t.relation).collect(),
        };
        let instances = inst
            .into_iter()
            .map(|(category, mask)| {
                let bbox = mask.bbox().expect("visible area checked");
                GtInstance { category, mask, bbox }
            })
            .collect();
        return Ok(SceneRecord {
            image: SceneImage::from_rgb8(id, h, w, &bytes),
            labels,
            hidden: HiddenGroundTruth {
                instances,
                triplets,
                captions,
            },
        });
    }
    Err(Error::Config(format!(
        "could not lay out a scene for seed {seed}; objects are too large for the image"
    )))
}

/// `n` scenes whose seeds derive from `(base_seed, split)`, with ids `{split}-{i}`.
pub fn generate_split(config: &GeneratorConfig, base_seed: u64, split: &str, n: usize) -> Result<Vec<SceneRecord>> {
    (0..n)
        .map(|i| {
            let seed = rng::derive_seed(base_seed, split, i as u64);
            generate_scene_with_id(seed, config, format!("{split}-{i:05}"))
        })
        .collect()
}

/// Sentence corpus drawn from scenes that are never rendered into any split.
pub fn generate_corpus(config: &GeneratorConfig, base_seed: u64, n: usize) -> Result<Vec<String>> {
    let mut rng = rng::stream(base_seed, "corpus-pick", 0);
    (0..n)
        .map(|i| {
            let seed = rng::derive_seed(base_seed, "corpus", i as u64);
            let rec = generate_scene(seed, config)?;
            let caps = &rec.hidden.captions;
            Ok(caps[rng.gen_range(0..caps.len())].clone())
        })
        .collect()
}
