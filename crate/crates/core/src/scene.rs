//! Procedural scenes, a raycasting camera simulator and surface point clouds.
//!
//! Scenes are rooms of axis-aligned boxes and spheres. Each pixel casts one
//! primary ray; the nearest hit is shaded as
//! `albedo · (0.3 + 0.7 · max(0, n·l)) / (1 + 0.05 t)` and misses take the
//! background color.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Pose, PoseDim};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("camera position {0:?} is outside the scene bounds")]
    OutsideBounds([f64; 3]),
    #[error("scene has no primitives")]
    Empty,
    #[error("primitive {0} is not inside the scene bounds")]
    PrimitiveOutside(usize),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("could only place {placed} of {wanted} collision-free poses")]
    Trajectory { placed: usize, wanted: usize },
    #[error("scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scene file: {0}")]
    Serialize(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, albedo: [f64; 3] },
    Cuboid { min: [f64; 3], max: [f64; 3], albedo: [f64; 3] },
}

/// Nearest intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
}

const RAY_EPS: f64 = 1e-9;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match *self {
            Primitive::Sphere { center: c, radius: r, .. } => {
                Aabb::new([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r])
            }
            Primitive::Cuboid { min, max, .. } => Aabb::new(min, max),
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Cuboid { min, max, .. } => {
                let e: [f64; 3] = std::array::from_fn(|i| max[i] - min[i]);
                2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
            }
        }
    }

    /// Whether `p` is strictly inside, or within `margin` of, the primitive.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let d: [f64; 3] = std::array::from_fn(|i| p[i] - center[i]);
                dot(d, d).sqrt() < radius + margin
            }
            Primitive::Cuboid { min, max, .. } => (0..3).all(|i| p[i] > min[i] - margin && p[i] < max[i] + margin),
        }
    }

    /// Distance from `p` to the primitive surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let d: [f64; 3] = std::array::from_fn(|i| p[i] - center[i]);
                (dot(d, d).sqrt() - radius).abs()
            }
            Primitive::Cuboid { min, max, .. } => {
                let outside: f64 = (0..3)
                    .map(|i| (min[i] - p[i]).max(p[i] - max[i]).max(0.0).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if outside > 0.0 {
                    outside
                } else {
                    (0..3).map(|i| (p[i] - min[i]).min(max[i] - p[i])).fold(f64::INFINITY, f64::min)
                }
            }
        }
    }

    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        match *self {
            Primitive::Sphere { center, radius, albedo } => {
                let oc: [f64; 3] = std::array::from_fn(|i| origin[i] - center[i]);
                let a = dot(dir, dir);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > RAY_EPS)?;
                let normal = std::array::from_fn(|i| (oc[i] + t * dir[i]) / radius);
                Some(Hit { t, normal, albedo })
            }
            Primitive::Cuboid { min, max, albedo } => {
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut near_axis, mut far_axis) = (0, 0);
                for i in 0..3 {
                    if dir[i] == 0.0 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((min[i] - origin[i]) / dir[i], (max[i] - origin[i]) / dir[i]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = i;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = i;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > RAY_EPS {
                    (t_near, near_axis)
                } else if t_far > RAY_EPS {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let mut normal = [0.0; 3];
                normal[axis] = -dir[axis].signum();
                Some(Hit { t, normal, albedo })
            }
        }
    }

    fn sample_surface(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let v = loop {
                    let v = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(rng));
                    let n = v.norm();
                    if n > 1e-9 {
                        break v / n;
                    }
                };
                std::array::from_fn(|i| center[i] + radius * v[i])
            }
            Primitive::Cuboid { min, max, .. } => {
                let e: [f64; 3] = std::array::from_fn(|i| max[i] - min[i]);
                // Faces normal to axis i have area e[j]·e[k]; two per axis.
                let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let axis = WeightedIndex::new(areas).map(|w| w.sample(rng)).unwrap_or(0);
                let mut p: [f64; 3] = std::array::from_fn(|i| min[i] + rng.random::<f64>() * e[i]);
                p[axis] = if rng.random::<bool>() { max[axis] } else { min[axis] };
                p
            }
        }
    }
}

fn default_light() -> [f64; 3] {
    let v = [0.3, 0.5, 0.8];
    let n = dot(v, v).sqrt();
    v.map(|c| c / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bounds: Aabb,
    pub background: [f64; 3],
    /// Unit vector pointing toward the directional light.
    #[serde(default = "default_light")]
    pub light: [f64; 3],
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub hfov: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { width: 32, height: 32, hfov: PI / 2.0 }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(SceneError::Intrinsics(format!("image {}x{} is smaller than 8x8", self.width, self.height)));
        }
        if !(self.hfov > 0.0 && self.hfov < PI) {
            return Err(SceneError::Intrinsics(format!("hfov {} is not in (0, π)", self.hfov)));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.hfov).tan()
    }

    /// Body-frame direction of the ray through the center of pixel `(row, col)`.
    pub fn ray_direction(&self, row: usize, col: usize) -> [f64; 3] {
        let (cx, cy) = (0.5 * self.width as f64, 0.5 * self.height as f64);
        [self.focal(), cx - (col as f64 + 0.5), cy - (row as f64 + 0.5)]
    }

    /// Continuous image coordinates `(u, v)` of a body-frame point, or `None`
    /// when its depth is not positive. Pixel `(row, col)` covers
    /// `[col, col+1) × [row, row+1)`.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[0] <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some((0.5 * self.width as f64 - f * p[1] / p[0], 0.5 * self.height as f64 - f * p[2] / p[0]))
    }

    pub fn in_image(&self, p: [f64; 3]) -> bool {
        self.project(p)
            .is_some_and(|(u, v)| u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64)
    }
}

/// World point to camera body frame.
pub fn world_to_body(pose: &Pose, p: [f64; 3]) -> [f64; 3] {
    let r = pose.rotation().0;
    let d = Vector3::new(p[0] - pose.position[0], p[1] - pose.position[1], p[2] - pose.position[2]);
    let b = r.transpose() * d;
    [b[0], b[1], b[2]]
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !self.bounds.contains_box(&p.bounding_box()) {
                return Err(SceneError::PrimitiveOutside(i));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: Scene = toml::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    /// Nearest hit of the world-space ray over all primitives. `t` is in
    /// units of `|dir|`.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .fold(None, |best: Option<Hit>, h| match best {
                Some(b) if b.t <= h.t => Some(b),
                _ => Some(h),
            })
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let lambert = dot(hit.normal, self.light).max(0.0);
        let k = (0.3 + 0.7 * lambert) / (1.0 + 0.05 * hit.t);
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    pub fn render(&self, intr: &CameraIntrinsics, pose: &Pose) -> Result<Image> {
        if !self.bounds.contains(pose.position, 0.0) {
            return Err(SceneError::OutsideBounds(pose.position));
        }
        let r = pose.rotation().0;
        let mut img = Image::filled(intr.width, intr.height, self.background);
        for row in 0..intr.height {
            for col in 0..intr.width {
                let d = intr.ray_direction(row, col);
                let w = (r * Vector3::new(d[0], d[1], d[2])).normalize();
                if let Some(hit) = self.trace(pose.position, [w[0], w[1], w[2]]) {
                    img.set_pixel(row, col, self.shade(&hit));
                }
            }
        }
        Ok(img)
    }

    /// [`render`](Self::render) plus i.i.d. Gaussian pixel noise, clamped to `[0, 1]`.
    pub fn render_noisy(&self, intr: &CameraIntrinsics, pose: &Pose, sigma: f64, rng: &mut impl Rng) -> Result<Image> {
        let mut img = self.render(intr, pose)?;
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| SceneError::Invalid(e.to_string()))?;
            for v in &mut img.data {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        Ok(img)
    }

    /// `n` points on primitive surfaces; primitives are chosen with probability
    /// proportional to area and points are area-uniform on each.
    pub fn export_point_cloud(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
        if n == 0 {
            return Err(SceneError::Invalid("point count must be at least 1".into()));
        }
        let areas: Vec<f64> = self.primitives.iter().map(Primitive::surface_area).collect();
        let pick = WeightedIndex::new(&areas).map_err(|_| SceneError::Empty)?;
        Ok((0..n).map(|_| self.primitives[pick.sample(rng)].sample_surface(rng)).collect())
    }

    pub fn collides(&self, p: [f64; 3], margin: f64) -> bool {
        self.primitives.iter().any(|prim| prim.contains(p, margin))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Room spans `[-half_extent, half_extent]` in x and y.
    pub half_extent: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Free-standing objects besides walls and floor.
    pub objects: usize,
    pub walls: bool,
    /// Objects stay outside this xy radius around the room center.
    pub clear_radius: f64,
    /// Build a scene invariant under a 180° turn about the vertical axis.
    pub symmetric: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { half_extent: 2.0, z_min: -1.0, z_max: 1.0, objects: 8, walls: true, clear_radius: 1.4, symmetric: false }
    }
}

fn hue_color(h: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.8 * r, 0.15 + 0.8 * g, 0.15 + 0.8 * b]
}

fn turned(p: &Primitive) -> Primitive {
    match *p {
        Primitive::Sphere { center, radius, albedo } => {
            Primitive::Sphere { center: [-center[0], -center[1], center[2]], radius, albedo }
        }
        Primitive::Cuboid { min, max, albedo } => Primitive::Cuboid {
            min: [-max[0], -max[1], min[2]],
            max: [-min[0], -min[1], max[2]],
            albedo,
        },
    }
}

impl Scene {
    /// Room with colored walls, a floor and random objects, deterministic in `seed`.
    pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<Self> {
        let h = cfg.half_extent;
        if !(h > 0.0 && cfg.z_max > cfg.z_min && cfg.clear_radius >= 0.0) {
            return Err(SceneError::Invalid("room extents must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = Aabb::new([-h, -h, cfg.z_min], [h, h, cfg.z_max]);
        let hue0: f64 = rng.random();
        let mut prims = Vec::new();
        let wall = 0.05;
        let floor_top = cfg.z_min + wall;
        prims.push(Primitive::Cuboid { min: [-h, -h, cfg.z_min], max: [h, h, floor_top], albedo: [0.55, 0.55, 0.5] });
        if cfg.walls {
            let (lo, hi) = (floor_top, cfg.z_max);
            let walls = [
                ([h - wall, -h, lo], [h, h, hi]),
                ([-h, h - wall, lo], [h, h, hi]),
                ([-h, -h, lo], [-h + wall, h, hi]),
                ([-h, -h, lo], [h, -h + wall, hi]),
            ];
            for (i, (min, max)) in walls.into_iter().enumerate() {
                // Opposite walls share a color in the symmetric variant.
                let k = if cfg.symmetric { i % 2 } else { i };
                let albedo = hue_color(hue0 + 0.618_034 * k as f64).map(|c| 0.35 + 0.6 * c);
                prims.push(Primitive::Cuboid { min, max, albedo });
            }
        }
        let inner = h - if cfg.walls { wall } else { 0.0 };
        let count = if cfg.symmetric { cfg.objects.div_ceil(2) } else { cfg.objects };
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count {
            attempts += 1;
            if attempts > 10_000 {
                return Err(SceneError::Invalid("cannot place objects outside the clear radius".into()));
            }
            let size: f64 = rng.random_range(0.1..0.3);
            let margin = size + 0.01;
            if inner - margin <= 0.0 {
                return Err(SceneError::Invalid("room too small for objects".into()));
            }
            let x = rng.random_range(-inner + margin..inner - margin);
            let y = rng.random_range(-inner + margin..inner - margin);
            if (x * x + y * y).sqrt() - size < cfg.clear_radius {
                continue;
            }
            let z = rng.random_range((floor_top + size)..(cfg.z_max - size).max(floor_top + size + 1e-3));
            let albedo = hue_color(hue0 + 0.37 + 0.618_034 * (placed as f64 + 4.0));
            let prim = if rng.random::<bool>() {
                Primitive::Sphere { center: [x, y, z], radius: size, albedo }
            } else {
                let hz = if rng.random::<bool>() { size } else { 0.5 * (z - floor_top) + size };
                Primitive::Cuboid { min: [x - size, y - size, (z - hz).max(floor_top)], max: [x + size, y + size, (z + hz).min(cfg.z_max)], albedo }
            };
            let bb = prim.bounding_box();
            if prims.iter().skip(1 + 4 * cfg.walls as usize).any(|p: &Primitive| {
                let o = p.bounding_box();
                (0..2).all(|i| bb.min[i] < o.max[i] + 0.05 && bb.max[i] > o.min[i] - 0.05)
            }) {
                continue;
            }
            if cfg.symmetric {
                let twin = turned(&prim);
                let tb = twin.bounding_box();
                if (0..2).all(|i| bb.min[i] < tb.max[i] + 0.05 && bb.max[i] > tb.min[i] - 0.05) {
                    continue;
                }
                prims.push(prim);
                prims.push(twin);
            } else {
                prims.push(prim);
            }
            placed += 1;
        }
        let light = if cfg.symmetric { [0.0, 0.0, 1.0] } else { default_light() };
        let scene = Scene { bounds, background: [0.7, 0.8, 0.95], light, seed, primitives: prims };
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryStyle {
    /// Circle around the room center, heading along the tangent.
    Loop,
    /// Regular grid over the room, heading toward the center.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub style: TrajectoryStyle,
    pub count: usize,
    /// Loop radius in meters.
    pub radius: f64,
    /// Loop start offset as a fraction of one step.
    pub phase: f64,
    /// Camera height.
    pub z: f64,
    /// Minimum clearance between camera and any primitive.
    pub clearance: f64,
    pub dim: PoseDim,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            style: TrajectoryStyle::Loop,
            count: 200,
            radius: 1.0,
            phase: 0.0,
            z: 0.0,
            clearance: 0.1,
            dim: PoseDim::Se2,
        }
    }
}

fn make_pose(pos: [f64; 3], heading: f64, dim: PoseDim) -> Pose {
    match dim {
        PoseDim::Se2 => Pose::se2(pos[0], pos[1], heading),
        PoseDim::Se3 => Pose::se3(pos, heading, 0.0, 0.0),
    }
}

pub fn generate_trajectory(scene: &Scene, spec: &TrajectorySpec) -> Result<Vec<Pose>> {
    let k = spec.count;
    if k < 2 {
        return Err(SceneError::Invalid("trajectory needs at least 2 poses".into()));
    }
    if spec.dim == PoseDim::Se2 && spec.z != 0.0 {
        return Err(SceneError::Invalid("planar trajectories run at z = 0".into()));
    }
    let c = scene.bounds.center();
    let free = |p: [f64; 3]| scene.bounds.contains(p, 0.0) && !scene.collides(p, spec.clearance);
    match spec.style {
        TrajectoryStyle::Loop => {
            let mut poses = Vec::with_capacity(k);
            for i in 0..k {
                let a = 2.0 * PI * (i as f64 + spec.phase) / k as f64;
                let p = [c[0] + spec.radius * a.cos(), c[1] + spec.radius * a.sin(), spec.z];
                if !free(p) {
                    return Err(SceneError::Trajectory { placed: i, wanted: k });
                }
                poses.push(make_pose(p, a + PI / 2.0, spec.dim));
            }
            Ok(poses)
        }
        TrajectoryStyle::Grid => {
            let e = scene.bounds.extents();
            let mut best = Vec::new();
            for refine in 0..8 {
                let n = k * (1 << refine);
                let cols = ((n as f64 * e[0] / e[1]).sqrt().ceil() as usize).max(1);
                let rows = n.div_ceil(cols);
                let cells: Vec<[f64; 3]> = (0..rows)
                    .flat_map(|r| (0..cols).map(move |q| (r, q)))
                    .map(|(r, q)| {
                        [
                            scene.bounds.min[0] + (q as f64 + 0.5) * e[0] / cols as f64,
                            scene.bounds.min[1] + (r as f64 + 0.5) * e[1] / rows as f64,
                            spec.z,
                        ]
                    })
                    .filter(|&p| free(p))
                    .collect();
                if cells.len() >= k {
                    best = (0..k).map(|i| cells[i * cells.len() / k]).collect();
                    break;
                }
                if cells.len() > best.len() {
                    best = cells;
                }
            }
            if best.len() < k {
                return Err(SceneError::Trajectory { placed: best.len(), wanted: k });
            }
            Ok(best
                .into_iter()
                .map(|p| {
                    let (dx, dy) = (c[0] - p[0], c[1] - p[1]);
                    let heading = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
                    make_pose(p, heading, spec.dim)
                })
                .collect())
        }
    }
}
