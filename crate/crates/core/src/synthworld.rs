//! Procedural driving scenes: ground polygons and boxes on a flat ground
//! plane, a flat-shaded frontal-view renderer, BEV ground-truth
//! rasterisation and an on-disk dataset format.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::geometry::{BevGridSpec, CameraIntrinsics};
use crate::rng::{indexed_substream, StreamRng};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BACKGROUND: [u8; 3] = [86, 110, 74];
/// Ground polygons are clipped to this depth before projection.
pub const Z_NEAR: f64 = 0.05;
const MAX_CLASSES: usize = 16;

/// How instances of a class are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassShape {
    /// Long strip along the depth axis, or a cross street.
    Road { width: (f64, f64) },
    /// Strip running beside a road edge.
    Walkway { width: (f64, f64) },
    /// Axis-aligned ground rectangle.
    Patch { width: (f64, f64), length: (f64, f64) },
    /// Axis-aligned 3D box.
    Box {
        width: (f64, f64),
        length: (f64, f64),
        height: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub dynamic: bool,
    pub color: [u8; 3],
    /// Inclusive instance-count range per scene.
    pub count: (usize, usize),
    pub shape: ClassShape,
}

impl ClassSpec {
    fn new(name: &str, dynamic: bool, color: [u8; 3], count: (usize, usize), shape: ClassShape) -> Self {
        Self {
            name: name.to_string(),
            dynamic,
            color,
            count,
            shape,
        }
    }
}

fn boxed(w: (f64, f64), l: (f64, f64), h: (f64, f64)) -> ClassShape {
    ClassShape::Box {
        width: w,
        length: l,
        height: h,
    }
}

/// Drivable, walkway, vehicle, pedestrian.
pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec::new("drivable", false, [128, 128, 128], (1, 2), ClassShape::Road { width: (6.0, 11.0) }),
        ClassSpec::new("walkway", false, [214, 190, 140], (0, 2), ClassShape::Walkway { width: (1.5, 3.0) }),
        ClassSpec::new("vehicle", true, [220, 40, 40], (1, 4), boxed((1.7, 2.2), (3.8, 5.0), (1.4, 2.0))),
        ClassSpec::new("pedestrian", true, [40, 90, 230], (0, 3), boxed((0.5, 0.8), (0.5, 0.8), (1.5, 1.9))),
    ]
}

/// Fourteen classes in the usual nuScenes ordering.
pub fn nuscenes_like_classes() -> Vec<ClassSpec> {
    let patch = |w, l| ClassShape::Patch { width: w, length: l };
    vec![
        ClassSpec::new("drivable", false, [128, 128, 128], (1, 2), ClassShape::Road { width: (6.0, 11.0) }),
        ClassSpec::new("ped_crossing", false, [250, 250, 250], (0, 1), patch((4.0, 8.0), (2.0, 3.0))),
        ClassSpec::new("walkway", false, [214, 190, 140], (0, 2), ClassShape::Walkway { width: (1.5, 3.0) }),
        ClassSpec::new("carpark", false, [160, 150, 190], (0, 1), patch((4.0, 8.0), (4.0, 8.0))),
        ClassSpec::new("car", true, [220, 40, 40], (0, 3), boxed((1.7, 2.0), (3.8, 4.8), (1.4, 1.7))),
        ClassSpec::new("truck", true, [230, 120, 30], (0, 1), boxed((2.2, 2.6), (6.0, 9.0), (2.5, 3.5))),
        ClassSpec::new("bus", true, [240, 200, 20], (0, 1), boxed((2.5, 2.8), (9.0, 12.0), (3.0, 3.5))),
        ClassSpec::new("trailer", true, [150, 80, 40], (0, 1), boxed((2.3, 2.6), (5.0, 8.0), (2.5, 3.2))),
        ClassSpec::new("construction_vehicle", true, [200, 160, 0], (0, 1), boxed((2.4, 3.0), (5.0, 7.0), (2.5, 3.5))),
        ClassSpec::new("pedestrian", true, [40, 90, 230], (0, 3), boxed((0.5, 0.8), (0.5, 0.8), (1.5, 1.9))),
        ClassSpec::new("motorcycle", true, [120, 40, 200], (0, 1), boxed((0.7, 0.9), (1.8, 2.2), (1.2, 1.5))),
        ClassSpec::new("bicycle", true, [40, 200, 200], (0, 1), boxed((0.5, 0.7), (1.6, 1.9), (1.0, 1.3))),
        ClassSpec::new("traffic_cone", true, [255, 100, 180], (0, 2), boxed((0.3, 0.4), (0.3, 0.4), (0.6, 0.9))),
        ClassSpec::new("barrier", true, [90, 60, 30], (0, 2), boxed((1.5, 2.5), (0.3, 0.5), (0.8, 1.1))),
    ]
}

/// 128x128 camera 1.6 m above the ground, horizon at row 40.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 64.0,
        fy: 64.0,
        cx: 64.0,
        cy: 40.0,
        cam_height: 1.6,
        image_width: 128,
        image_height: 128,
    }
}

/// 64x64 cells of 0.5 m covering depth 1..33 m in extents of 16, 16 and 32 rows.
pub fn default_grid() -> BevGridSpec {
    BevGridSpec::with_extent_cells(64, 0.5, 1.0, &[16, 16, 32]).expect("default grid is valid")
}

/// Scene distribution together with the world it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub classes: Vec<ClassSpec>,
    pub elevated_probability: f64,
    pub elevation_range: (f64, f64),
    pub grid: BevGridSpec,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            elevated_probability: 0.0,
            elevation_range: (0.4, 1.2),
            grid: default_grid(),
            intrinsics: default_intrinsics(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            bail!(Config, "scene needs at least one class");
        }
        if self.classes.len() > MAX_CLASSES {
            bail!(Config, "at most {} classes fit the label format", MAX_CLASSES);
        }
        let pos_range = |r: (f64, f64), what: &str, name: &str| -> Result<()> {
            if !(r.0 > 0.0 && r.1 >= r.0 && r.1.is_finite()) {
                bail!(Config, "class {}: {} range {:?} must be positive and ordered", name, what, r);
            }
            Ok(())
        };
        for c in &self.classes {
            if c.count.0 > c.count.1 {
                bail!(Config, "class {}: count range {:?} is reversed", c.name, c.count);
            }
            match c.shape {
                ClassShape::Road { width } | ClassShape::Walkway { width } => pos_range(width, "width", &c.name)?,
                ClassShape::Patch { width, length } => {
                    pos_range(width, "width", &c.name)?;
                    pos_range(length, "length", &c.name)?;
                }
                ClassShape::Box { width, length, height } => {
                    pos_range(width, "width", &c.name)?;
                    pos_range(length, "length", &c.name)?;
                    pos_range(height, "height", &c.name)?;
                    if length.1 >= self.grid.z_max - self.grid.z_min
                        || width.1 >= 2.0 * self.grid.lateral_half_width()
                    {
                        bail!(Config, "class {}: boxes do not fit the grid", c.name);
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.elevated_probability) {
            bail!(Config, "elevated probability must lie in [0, 1]");
        }
        let (e0, e1) = self.elevation_range;
        if !(e0 >= 0.0 && e1 >= e0 && e1.is_finite()) {
            bail!(Config, "elevation range {:?} must be non-negative and ordered", self.elevation_range);
        }
        self.grid.validate()?;
        self.intrinsics.validate()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn static_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| !self.classes[i].dynamic).collect()
    }

    pub fn dynamic_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i].dynamic).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPolygon {
    pub class: usize,
    /// `(x, z)` vertices on the ground plane.
    pub vertices: Vec<(f64, f64)>,
    pub brightness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub class: usize,
    pub x: f64,
    pub z: f64,
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub elevation: f64,
    pub brightness: f64,
}

impl BoxObject {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        (x - self.x).abs() < self.width / 2.0 && (z - self.z).abs() < self.length / 2.0
    }

    /// Corners as `(x, height, z)`.
    pub fn corners(&self) -> [(f64, f64, f64); 8] {
        let mut out = [(0.0, 0.0, 0.0); 8];
        let mut k = 0;
        for dx in [-0.5, 0.5] {
            for dz in [-0.5, 0.5] {
                for h in [self.elevation, self.elevation + self.height] {
                    out[k] = (self.x + dx * self.width, h, self.z + dz * self.length);
                    k += 1;
                }
            }
        }
        out
    }

    fn overlaps(&self, other: &BoxObject) -> bool {
        (self.x - other.x).abs() < (self.width + other.width) / 2.0
            && (self.z - other.z).abs() < (self.length + other.length) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub polygons: Vec<GroundPolygon>,
    pub boxes: Vec<BoxObject>,
}

impl Scene {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            polygons: Vec::new(),
            boxes: Vec::new(),
        }
    }

    /// Instances per class id.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for p in &self.polygons {
            counts[p.class] += 1;
        }
        for b in &self.boxes {
            counts[b.class] += 1;
        }
        counts
    }
}

fn uniform(rng: &mut StreamRng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn brightness(rng: &mut StreamRng) -> f64 {
    rng.random_range(0.85..1.15)
}

fn clamp_x(v: f64, hw: f64) -> f64 {
    v.clamp(-hw, hw)
}

/// Draws a scene; a pure function of `(seed, config)`.
pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let grid = &config.grid;
    let intr = &config.intrinsics;
    let hw = grid.lateral_half_width();
    let (z0, z1) = (grid.z_min, grid.z_max);
    let mut rng = indexed_substream(seed, "scene", 0);
    let mut scene = Scene::empty(seed);
    // left/right edges at the near and far ends of the first longitudinal road
    let mut road_edges: Option<[(f64, f64); 2]> = None;

    for (class, spec) in config.classes.iter().enumerate() {
        let n = rng.random_range(spec.count.0..=spec.count.1);
        let mut sides_used = [false; 2];
        for k in 0..n {
            match spec.shape {
                ClassShape::Road { width } => {
                    let w = uniform(&mut rng, width);
                    if k == 0 {
                        let near = rng.random_range(-hw / 4.0..hw / 4.0);
                        let far = near + rng.random_range(-hw / 3.0..hw / 3.0);
                        let v = vec![
                            (clamp_x(near - w / 2.0, hw), z0),
                            (clamp_x(near + w / 2.0, hw), z0),
                            (clamp_x(far + w / 2.0, hw), z1),
                            (clamp_x(far - w / 2.0, hw), z1),
                        ];
                        road_edges = Some([(near - w / 2.0, far - w / 2.0), (near + w / 2.0, far + w / 2.0)]);
                        scene.polygons.push(GroundPolygon {
                            class,
                            vertices: v,
                            brightness: brightness(&mut rng),
                        });
                    } else {
                        let w = w.min((z1 - z0) / 2.0);
                        let a = rng.random_range(z0..z1 - w);
                        scene.polygons.push(GroundPolygon {
                            class,
                            vertices: vec![(-hw, a), (hw, a), (hw, a + w), (-hw, a + w)],
                            brightness: brightness(&mut rng),
                        });
                    }
                }
                ClassShape::Walkway { width } => {
                    let w = uniform(&mut rng, width).min(hw);
                    let mut side = rng.random_range(0..2usize);
                    if sides_used[side] {
                        side = 1 - side;
                    }
                    let edges = match road_edges {
                        Some(edges) => edges,
                        None => {
                            let c = rng.random_range(-hw / 2.0..hw / 2.0);
                            [(c, c), (c, c)]
                        }
                    };
                    let strip = |side: usize| {
                        let (e_near, e_far) = edges[side];
                        let s = if side == 0 { -1.0 } else { 1.0 };
                        vec![
                            (clamp_x(e_near, hw), z0),
                            (clamp_x(e_near + s * w, hw), z0),
                            (clamp_x(e_far + s * w, hw), z1),
                            (clamp_x(e_far, hw), z1),
                        ]
                    };
                    let fits = |v: &[(f64, f64)]| polygon_area(v) >= 0.25 * w * (z1 - z0);
                    let mut vertices = strip(side);
                    if !fits(&vertices) {
                        side = 1 - side;
                        vertices = strip(side);
                    }
                    if !fits(&vertices) {
                        // the road covers the grid on both sides; run along the border
                        let s = if side == 0 { -1.0 } else { 1.0 };
                        vertices = vec![(s * hw, z0), (s * (hw - w), z0), (s * (hw - w), z1), (s * hw, z1)];
                    }
                    sides_used[side] = true;
                    scene.polygons.push(GroundPolygon {
                        class,
                        vertices,
                        brightness: brightness(&mut rng),
                    });
                }
                ClassShape::Patch { width, length } => {
                    let w = uniform(&mut rng, width).min(2.0 * hw);
                    let l = uniform(&mut rng, length).min(z1 - z0);
                    let x = rng.random_range(-hw + w / 2.0..=hw - w / 2.0);
                    let z = rng.random_range(z0 + l / 2.0..=z1 - l / 2.0);
                    scene.polygons.push(GroundPolygon {
                        class,
                        vertices: vec![
                            (x - w / 2.0, z - l / 2.0),
                            (x + w / 2.0, z - l / 2.0),
                            (x + w / 2.0, z + l / 2.0),
                            (x - w / 2.0, z + l / 2.0),
                        ],
                        brightness: brightness(&mut rng),
                    });
                }
                ClassShape::Box { width, length, height } => {
                    let w = uniform(&mut rng, width);
                    let l = uniform(&mut rng, length);
                    let h = uniform(&mut rng, height);
                    let elevation = if rng.random_bool(config.elevated_probability) {
                        uniform(&mut rng, config.elevation_range)
                    } else {
                        0.0
                    };
                    let b = brightness(&mut rng);
                    let mut placed = None;
                    for _ in 0..20 {
                        let z = rng.random_range(z0 + l / 2.0..=z1 - l / 2.0);
                        // keep the near face inside the horizontal field of view
                        let near = z - l / 2.0;
                        let visible = intr.cx.min(intr.image_width as f64 - intr.cx) * near / intr.fx;
                        let lim = (hw - w / 2.0).min((visible - w / 2.0).max(0.0));
                        let x = if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
                        let candidate = BoxObject {
                            class,
                            x,
                            z,
                            width: w,
                            length: l,
                            height: h,
                            elevation,
                            brightness: b,
                        };
                        let clear = !scene.boxes.iter().any(|o| o.overlaps(&candidate));
                        placed = Some(candidate);
                        if clear {
                            break;
                        }
                    }
                    scene.boxes.extend(placed);
                }
            }
        }
    }
    Ok(scene)
}

/// Absolute shoelace area.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    a.abs() / 2.0
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Clips a ground polygon to `z >= z_near`.
fn clip_near(poly: &[(f64, f64)], z_near: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ain, bin) = (a.1 >= z_near, b.1 >= z_near);
        if ain {
            out.push(a);
        }
        if ain != bin {
            let t = (z_near - a.1) / (b.1 - a.1);
            out.push((a.0 + t * (b.0 - a.0), z_near));
        }
    }
    out
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn shade(color: [u8; 3], brightness: f64) -> [u8; 3] {
    color.map(|c| (c as f64 * brightness).round().clamp(0.0, 255.0) as u8)
}

/// An 8-bit RGB image in row-major `H x W x 3` layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let k = (row * self.width + col) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, color: [u8; 3]) {
        let k = (row * self.width + col) * 3;
        self.data[k..k + 3].copy_from_slice(&color);
    }

    /// Values scaled to `[0, 1]`, same layout.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Mirrors columns.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Fills pixels whose centres fall inside `poly` (image coordinates).
    fn fill_polygon(&mut self, poly: &[(f64, f64)], color: [u8; 3]) {
        if poly.len() < 3 {
            return;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(u, v) in poly {
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let c0 = (u0 - 0.5).ceil().max(0.0) as usize;
        let r0 = (v0 - 0.5).ceil().max(0.0) as usize;
        let c1 = ((u1 - 0.5).floor() + 1.0).clamp(0.0, self.width as f64) as usize;
        let r1 = ((v1 - 0.5).floor() + 1.0).clamp(0.0, self.height as f64) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                if point_in_polygon(c as f64 + 0.5, r as f64 + 0.5, poly) {
                    self.set(r, c, color);
                }
            }
        }
    }
}

/// Flat-shaded painter's-algorithm rendering of the frontal view.
pub fn render_fv(
    scene: &Scene,
    classes: &[ClassSpec],
    intr: &CameraIntrinsics,
    image_h: usize,
    image_w: usize,
) -> Result<RgbImage> {
    intr.validate()?;
    let mut img = RgbImage::filled(image_h, image_w, BACKGROUND);
    let color_of = |class: usize| -> Result<[u8; 3]> {
        classes
            .get(class)
            .map(|c| c.color)
            .ok_or_else(|| Error::Config(format!("scene refers to unknown class {class}")))
    };
    for p in &scene.polygons {
        let clipped = clip_near(&p.vertices, Z_NEAR);
        let projected = clipped
            .iter()
            .map(|&(x, z)| intr.ground_to_pixel(x, z))
            .collect::<Result<Vec<_>>>()?;
        img.fill_polygon(&projected, shade(color_of(p.class)?, p.brightness));
    }
    let mut order: Vec<usize> = (0..scene.boxes.len()).collect();
    order.sort_by(|&a, &b| scene.boxes[b].z.total_cmp(&scene.boxes[a].z).then(a.cmp(&b)));
    for i in order {
        let b = &scene.boxes[i];
        if b.z - b.length / 2.0 <= Z_NEAR {
            continue;
        }
        let pts = b
            .corners()
            .iter()
            .map(|&(x, h, z)| intr.point_to_pixel(x, h, z))
            .collect::<Result<Vec<_>>>()?;
        img.fill_polygon(&convex_hull(pts), shade(color_of(b.class)?, b.brightness));
    }
    Ok(img)
}

/// Per-class occupancy (`C x Z x W`) and frustum validity (`Z x W`).
pub fn render_bev_gt(
    scene: &Scene,
    classes: usize,
    grid: &BevGridSpec,
    intr: &CameraIntrinsics,
) -> Result<(Vec<bool>, Vec<bool>)> {
    grid.validate()?;
    let validity = grid.frustum_mask(intr);
    let plane = grid.num_cells();
    let mut labels = vec![false; classes * plane];
    for zi in 0..grid.depth_cells {
        for xi in 0..grid.lateral_cells {
            let k = zi * grid.lateral_cells + xi;
            if !validity[k] {
                continue;
            }
            let (x, z) = grid.cell_center(zi, xi);
            for p in &scene.polygons {
                if p.class >= classes {
                    bail!(Config, "scene refers to unknown class {}", p.class);
                }
                if point_in_polygon(x, z, &p.vertices) {
                    labels[p.class * plane + k] = true;
                }
            }
            for b in &scene.boxes {
                if b.class >= classes {
                    bail!(Config, "scene refers to unknown class {}", b.class);
                }
                if b.contains(x, z) {
                    labels[b.class * plane + k] = true;
                }
            }
        }
    }
    Ok((labels, validity))
}

/// One frontal image with its BEV targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub fv_image: RgbImage,
    pub bev_labels: Vec<bool>,
    pub validity: Vec<bool>,
    pub intrinsics: CameraIntrinsics,
    pub scene: Scene,
}

impl SampleRecord {
    pub fn generate(id: String, seed: u64, config: &SceneConfig) -> Result<Self> {
        let scene = sample_scene(seed, config)?;
        let intr = config.intrinsics;
        let fv_image = render_fv(&scene, &config.classes, &intr, intr.image_height, intr.image_width)?;
        let (bev_labels, validity) = render_bev_gt(&scene, config.classes.len(), &config.grid, &intr)?;
        Ok(Self {
            id,
            fv_image,
            bev_labels,
            validity,
            intrinsics: intr,
            scene,
        })
    }
}

/// Generator settings for a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train: usize,
    pub val: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train: 200,
            val: 50,
        }
    }
}

/// Generates `train + val` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_samples(config: &DatasetConfig, seed: u64) -> Result<Vec<SampleRecord>> {
    config.scene.validate()?;
    (0..config.train + config.val)
        .map(|i| {
            let s: u64 = indexed_substream(seed, "sample", i as u64).random();
            SampleRecord::generate(format!("{i:06}"), s, &config.scene)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub fv: String,
    pub bev: String,
    pub valid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub scene: Scene,
    pub checksums: Checksums,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub static_classes: Vec<usize>,
    pub dynamic_classes: Vec<usize>,
    pub grid: BevGridSpec,
    pub image_height: usize,
    pub image_width: usize,
    /// e.g. `"train:200,val:50"`; splits take consecutive samples.
    pub splits: String,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn parse_splits(&self) -> Result<Vec<(String, std::ops::Range<usize>)>> {
        parse_splits(&self.splits, self.samples.len())
    }

    /// Hash over all sample checksums.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.checksums.fv.as_bytes());
            h.update(s.checksums.bev.as_bytes());
            h.update(s.checksums.valid.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn parse_splits(spec: &str, total: usize) -> Result<Vec<(String, std::ops::Range<usize>)>> {
    let mut out = Vec::new();
    let mut start = 0;
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, n) = part
            .split_once(':')
            .ok_or_else(|| Error::Data(format!("bad split entry '{part}'")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad split size in '{part}'")))?;
        let name = name.trim();
        if name.is_empty() || out.iter().any(|(o, _)| o == name) {
            bail!(Data, "split name '{}' is empty or repeated", name);
        }
        out.push((name.to_string(), start..start + n));
        start += n;
    }
    if start != total {
        bail!(Data, "splits cover {} samples but the dataset has {}", start, total);
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        w.write_image_data(data)
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    }
    Ok(buf)
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Data(format!("png decode: {e}")))?;
    let mut data = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::Data(format!("png decode: {e}")))?;
    data.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Packs `C x Z x W` occupancy into one 16-bit word per cell, bit `c` = class `c`.
pub fn pack_labels(labels: &[bool], classes: usize) -> Vec<u16> {
    let plane = labels.len() / classes.max(1);
    (0..plane)
        .map(|k| (0..classes).fold(0u16, |acc, c| acc | ((labels[c * plane + k] as u16) << c)))
        .collect()
}

pub fn unpack_labels(words: &[u16], classes: usize) -> Result<Vec<bool>> {
    let plane = words.len();
    let mut out = vec![false; classes * plane];
    for (k, &w) in words.iter().enumerate() {
        if classes < 16 && w >> classes != 0 {
            bail!(Data, "label word {:#06x} sets bits beyond {} classes", w, classes);
        }
        for c in 0..classes {
            out[c * plane + k] = w & (1 << c) != 0;
        }
    }
    Ok(out)
}

fn sample_files(dir: &Path, id: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("fv_{id}.png")),
        dir.join(format!("bev_{id}.png")),
        dir.join(format!("valid_{id}.png")),
    ]
}

/// Writes samples, their PNG payloads and the manifest into `dir`.
pub fn write_dataset(samples: &[SampleRecord], config: &SceneConfig, splits: &str, dir: &Path) -> Result<Manifest> {
    config.validate()?;
    parse_splits(splits, samples.len())?;
    fs::create_dir_all(dir)?;
    let classes = config.classes.len();
    let grid = &config.grid;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.bev_labels.len() != classes * grid.num_cells() || s.validity.len() != grid.num_cells() {
            bail!(Shape, "sample {} does not match the grid and class set", s.id);
        }
        let fv = encode_png(
            s.fv_image.width,
            s.fv_image.height,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &s.fv_image.data,
        )?;
        let words: Vec<u8> = pack_labels(&s.bev_labels, classes)
            .iter()
            .flat_map(|w| w.to_be_bytes())
            .collect();
        let bev = encode_png(
            grid.lateral_cells,
            grid.depth_cells,
            png::ColorType::Grayscale,
            png::BitDepth::Sixteen,
            &words,
        )?;
        let valid_bytes: Vec<u8> = s.validity.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let valid = encode_png(
            grid.lateral_cells,
            grid.depth_cells,
            png::ColorType::Grayscale,
            png::BitDepth::Eight,
            &valid_bytes,
        )?;
        let [pf, pb, pv] = sample_files(dir, &s.id);
        fs::write(pf, &fv)?;
        fs::write(pb, &bev)?;
        fs::write(pv, &valid)?;
        entries.push(ManifestSample {
            id: s.id.clone(),
            intrinsics: s.intrinsics,
            scene: s.scene.clone(),
            checksums: Checksums {
                fv: sha256_hex(&fv),
                bev: sha256_hex(&bev),
                valid: sha256_hex(&valid),
            },
        });
    }
    let (h, w) = samples
        .first()
        .map(|s| (s.fv_image.height, s.fv_image.width))
        .unwrap_or((config.intrinsics.image_height, config.intrinsics.image_width));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        class_names: config.class_names(),
        static_classes: config.static_ids(),
        dynamic_classes: config.dynamic_ids(),
        grid: grid.clone(),
        image_height: h,
        image_width: w,
        splits: splits.to_string(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Generates a dataset and writes it.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(config, seed)?;
    let splits = format!("train:{},val:{}", config.train, config.val);
    write_dataset(&samples, &config.scene, &splits, dir)
}

/// Handle on a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    splits: Vec<(String, std::ops::Range<usize>)>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("corrupt manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            bail!(Data, "unknown dataset format version {}", manifest.format_version);
        }
        if manifest.class_names.is_empty() || manifest.class_names.len() > MAX_CLASSES {
            bail!(Data, "manifest lists {} classes", manifest.class_names.len());
        }
        manifest.grid.validate()?;
        let splits = manifest.parse_splits()?;
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn split_names(&self) -> Vec<&str> {
        self.splits.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn split_len(&self, name: &str) -> Option<usize> {
        self.split(name).ok().map(|r| r.len())
    }

    pub fn split(&self, name: &str) -> Result<std::ops::Range<usize>> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| Error::Data(format!("dataset has no split '{name}'")))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.manifest.samples.iter().position(|s| s.id == id)
    }

    /// Loads and verifies sample `index`.
    pub fn load(&self, index: usize) -> Result<SampleRecord> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))?;
        let grid = &self.manifest.grid;
        let classes = self.num_classes();
        let [pf, pb, pv] = sample_files(&self.root, &entry.id);
        let read = |p: &Path, expected: &str| -> Result<Vec<u8>> {
            let bytes = fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            if sha256_hex(&bytes) != expected {
                bail!(Data, "checksum mismatch for {}", p.display());
            }
            Ok(bytes)
        };
        let fv = decode_png(&read(&pf, &entry.checksums.fv)?)?;
        if fv.color != png::ColorType::Rgb || fv.depth != png::BitDepth::Eight {
            bail!(Data, "{} is not 8-bit RGB", pf.display());
        }
        if fv.width != self.manifest.image_width || fv.height != self.manifest.image_height {
            bail!(Data, "{} has the wrong size", pf.display());
        }
        let bev = decode_png(&read(&pb, &entry.checksums.bev)?)?;
        if bev.color != png::ColorType::Grayscale
            || bev.depth != png::BitDepth::Sixteen
            || bev.width != grid.lateral_cells
            || bev.height != grid.depth_cells
        {
            bail!(Data, "{} is not a 16-bit label map of the grid size", pb.display());
        }
        let words: Vec<u16> = bev
            .data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        let bev_labels = unpack_labels(&words, classes)?;
        let valid = decode_png(&read(&pv, &entry.checksums.valid)?)?;
        if valid.color != png::ColorType::Grayscale
            || valid.depth != png::BitDepth::Eight
            || valid.width != grid.lateral_cells
            || valid.height != grid.depth_cells
        {
            bail!(Data, "{} is not an 8-bit mask of the grid size", pv.display());
        }
        let validity = valid
            .data
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                255 => Ok(true),
                _ => Err(Error::Data(format!("{} is not binary", pv.display()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleRecord {
            id: entry.id.clone(),
            fv_image: RgbImage {
                height: fv.height,
                width: fv.width,
                data: fv.data,
            },
            bev_labels,
            validity,
            intrinsics: entry.intrinsics,
            scene: entry.scene.clone(),
        })
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<SampleRecord>> {
        self.split(name)?.map(|i| self.load(i)).collect()
    }
}

/// Mirrors a sample left-right: image columns, BEV lateral axis, principal point.
pub fn flip_sample(s: &SampleRecord, classes: usize, lateral: usize) -> SampleRecord {
    let flip_plane = |v: &[bool]| -> Vec<bool> {
        let mut out = v.to_vec();
        for row in out.chunks_mut(lateral) {
            row.reverse();
        }
        out
    };
    debug_assert_eq!(s.bev_labels.len() % (classes * lateral), 0);
    let mut scene = s.scene.clone();
    for p in &mut scene.polygons {
        for v in &mut p.vertices {
            v.0 = -v.0;
        }
    }
    for b in &mut scene.boxes {
        b.x = -b.x;
    }
    SampleRecord {
        id: s.id.clone(),
        fv_image: s.fv_image.flipped(),
        bev_labels: flip_plane(&s.bev_labels),
        validity: flip_plane(&s.validity),
        intrinsics: s.intrinsics.flipped(),
        scene,
    }
}
