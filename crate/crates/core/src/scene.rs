//! Synthetic scenes and a simulated spinning scanner.
//!
//! Scenes are described in world coordinates by planes, yaw-oriented boxes
//! and vertical cylinders. The scanner fires one ray per pixel center of its
//! [`ProjectionConfig`] (plus a per-scan azimuth offset drawn from the
//! seed), so every return projects back into the pixel of the ray that
//! produced it.
//!
//! Scene files are TOML:
//!
//! ```toml
//! [scanner]              # any ProjectionConfig key
//! height = 64
//! width = 1024
//! fov_up_deg = 2.0
//! fov_down_deg = -24.8
//! max_range = 80.0
//! azimuth_jitter = 0.5   # fraction of a column; per-scan offset range
//! dropout = 0.0          # probability of discarding a return
//!
//! [[plane]]
//! normal = [0.0, 0.0, 1.0]
//! offset = -1.73         # points satisfy normal · p = offset
//!
//! [[box]]
//! center = [10.0, 6.0, 0.0]
//! size = [4.0, 2.0, 3.0]
//! yaw_deg = 15.0
//! velocity = [0.0, 0.0, 0.0]   # meters per frame, optional
//!
//! [[cylinder]]
//! center = [5.0, -4.0]
//! radius = 0.3
//! z_min = -1.73
//! z_max = 3.0
//! ```

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{yaw_matrix, Pose};
use crate::pointcloud::PointCloud;
use crate::projection::ProjectionConfig;

const MIN_HIT_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    /// World-frame displacement per frame; non-zero marks a dynamic object.
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScannerConfig {
    #[serde(flatten)]
    pub projection: ProjectionConfig,
    #[serde(default = "default_jitter")]
    pub azimuth_jitter: f64,
    #[serde(default)]
    pub dropout: f64,
}

fn default_jitter() -> f64 {
    0.5
}

impl Default for ScannerConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            azimuth_jitter: default_jitter(),
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub scanner: ScannerConfig,
    #[serde(default, rename = "plane")]
    pub planes: Vec<Plane>,
    #[serde(default, rename = "box")]
    pub boxes: Vec<BoxPrimitive>,
    #[serde(default, rename = "cylinder")]
    pub cylinders: Vec<Cylinder>,
}

/// Which primitive a ray hit, and where along the ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub primitive: PrimitiveId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveId {
    Plane(usize),
    Box(usize),
    Cylinder(usize),
}

/// Scan output with per-point provenance, used as a correspondence oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub cloud: PointCloud,
    /// `(row, col)` of the ray that produced each point.
    pub ray: Vec<(usize, usize)>,
    pub primitive: Vec<PrimitiveId>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty() && self.boxes.is_empty() && self.cylinders.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.scanner.projection.validate()?;
        if self.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        if !(0.0..=1.0).contains(&self.scanner.azimuth_jitter)
            || !(0.0..1.0).contains(&self.scanner.dropout)
        {
            return Err(Error::Config(
                "azimuth_jitter must be in [0,1], dropout in [0,1)".into(),
            ));
        }
        for p in &self.planes {
            if Vector3::from(p.normal).norm() < 1e-12 {
                return Err(Error::Config("plane normal must be non-zero".into()));
            }
        }
        for b in &self.boxes {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config("box sizes must be positive".into()));
            }
        }
        for c in &self.cylinders {
            if !(c.radius > 0.0) || !(c.z_min < c.z_max) {
                return Err(Error::Config(
                    "cylinder needs radius > 0 and z_min < z_max".into(),
                ));
            }
        }
        Ok(())
    }

    /// The scene after `frame` frames of dynamic-object motion.
    pub fn at_frame(&self, frame: usize) -> SceneSpec {
        let mut s = self.clone();
        for b in &mut s.boxes {
            for k in 0..3 {
                b.center[k] += b.velocity[k] * frame as f64;
            }
        }
        s
    }

    /// Nearest intersection of the ray `origin + t·dir` (t > 0) with any
    /// primitive. `dir` must be unit length.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let boxes: Vec<usize> = (0..self.boxes.len()).collect();
        let cylinders: Vec<usize> = (0..self.cylinders.len()).collect();
        self.cast_among(origin, dir, &boxes, &cylinders)
    }

    fn cast_among(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        boxes: &[usize],
        cylinders: &[usize],
    ) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut offer = |t: Option<f64>, primitive: PrimitiveId| {
            if let Some(t) = t {
                let closer = best
                    .is_none_or(|b| t < b.distance || (t == b.distance && primitive < b.primitive));
                if t > MIN_HIT_DISTANCE && closer {
                    best = Some(Hit {
                        distance: t,
                        primitive,
                    });
                }
            }
        };
        for (i, p) in self.planes.iter().enumerate() {
            offer(ray_plane(p, origin, dir), PrimitiveId::Plane(i));
        }
        for &i in boxes {
            offer(ray_box(&self.boxes[i], origin, dir), PrimitiveId::Box(i));
        }
        for &i in cylinders {
            offer(
                ray_cylinder(&self.cylinders[i], origin, dir),
                PrimitiveId::Cylinder(i),
            );
        }
        best
    }

    /// Bounding spheres `(center, radius)` of boxes, then cylinders.
    fn bounding_spheres(&self) -> Vec<(Vector3<f64>, f64)> {
        let boxes = self
            .boxes
            .iter()
            .map(|b| (Vector3::from(b.center), 0.5 * Vector3::from(b.size).norm()));
        let cylinders = self.cylinders.iter().map(|c| {
            let half = 0.5 * (c.z_max - c.z_min);
            (
                Vector3::new(c.center[0], c.center[1], c.z_min + half),
                c.radius.hypot(half),
            )
        });
        boxes.chain(cylinders).collect()
    }

    /// Scans the scene from `sensor` (sensor-to-world pose). Points are
    /// returned in the sensor frame, in ray order (row-major).
    pub fn scan(&self, seed: u64, sensor: &Pose) -> Result<Scan> {
        self.validate()?;
        let cfg = &self.scanner.projection;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = self.scanner.azimuth_jitter;
        let offset = if jitter > 0.0 {
            rng.random_range(-0.5 * jitter..0.5 * jitter) * cfg.horizontal_resolution()
        } else {
            0.0
        };
        let world_to_sensor = sensor.inverse();
        let culling = ColumnCulling::new(self, sensor, cfg, offset);
        let mut points = Vec::new();
        let mut ray = Vec::new();
        let mut primitive = Vec::new();
        for row in 0..cfg.height {
            let elevation = cfg.row_elevation(row);
            let (se, ce) = elevation.sin_cos();
            for col in 0..cfg.width {
                let azimuth = cfg.col_azimuth(col) + offset;
                let (sa, ca) = azimuth.sin_cos();
                let dir_sensor = Vector3::new(ce * ca, ce * sa, se);
                let dir = sensor.rotation * dir_sensor;
                let (boxes, cylinders) = culling.candidates(col, &dir_sensor);
                let Some(hit) = self.cast_among(&sensor.translation, &dir, &boxes, &cylinders)
                else {
                    continue;
                };
                if hit.distance > cfg.max_range {
                    continue;
                }
                if self.scanner.dropout > 0.0 && rng.random::<f64>() < self.scanner.dropout {
                    continue;
                }
                let world = sensor.translation + dir * hit.distance;
                points.push(world_to_sensor.apply(&world));
                ray.push((row, col));
                primitive.push(hit.primitive);
            }
        }
        Ok(Scan {
            cloud: PointCloud::new(points),
            ray,
            primitive,
        })
    }

    /// Unsigned distance from a world point to the surface of a primitive.
    pub fn surface_distance(&self, id: PrimitiveId, p: &Vector3<f64>) -> f64 {
        match id {
            PrimitiveId::Plane(i) => {
                let pl = &self.planes[i];
                let n = Vector3::from(pl.normal);
                (n.dot(p) - pl.offset).abs() / n.norm()
            }
            PrimitiveId::Box(i) => {
                let b = &self.boxes[i];
                let local = box_local(b, p);
                let h = Vector3::from(b.size) * 0.5;
                let q = local.abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            PrimitiveId::Cylinder(i) => {
                let c = &self.cylinders[i];
                let radial = (Vector2::new(p[0], p[1]) - Vector2::from(c.center)).norm() - c.radius;
                let mid = 0.5 * (c.z_min + c.z_max);
                let axial = (p[2] - mid).abs() - 0.5 * (c.z_max - c.z_min);
                let outside = Vector2::new(radial.max(0.0), axial.max(0.0)).norm();
                (outside + radial.max(axial).min(0.0)).abs()
            }
        }
    }
}

/// Conservative per-column candidate lists built from bounding spheres seen
/// from the sensor, so each ray only tests primitives it can possibly hit.
struct ColumnCulling {
    n_boxes: usize,
    /// Sensor-frame unit direction to the sphere center and cos of its
    /// angular radius; `None` when the sensor is inside the sphere.
    cones: Vec<Option<(Vector3<f64>, f64)>>,
    columns: Vec<Vec<usize>>,
}

impl ColumnCulling {
    fn new(spec: &SceneSpec, sensor: &Pose, cfg: &ProjectionConfig, offset: f64) -> Self {
        let spheres = spec.bounding_spheres();
        let to_sensor = sensor.inverse();
        let width = cfg.width;
        let res = cfg.horizontal_resolution();
        let mut columns = vec![Vec::new(); width];
        let mut cones = Vec::with_capacity(spheres.len());
        for (k, (center, radius)) in spheres.iter().enumerate() {
            let c = to_sensor.apply(center);
            let d = c.norm();
            let r = radius * (1.0 + 1e-9) + 1e-9;
            if d <= r {
                cones.push(None);
                columns.iter_mut().for_each(|col| col.push(k));
                continue;
            }
            let alpha = (r / d).asin();
            cones.push(Some((c / d, alpha.cos())));
            let elevation = (c[2] / d).asin();
            if elevation.abs() + alpha >= std::f64::consts::FRAC_PI_2 - 1e-6 {
                columns.iter_mut().for_each(|col| col.push(k));
                continue;
            }
            let half = (alpha.sin() / elevation.cos()).min(1.0).asin();
            let azimuth = c[1].atan2(c[0]);
            let centre_col = (azimuth - offset - cfg.col_azimuth(0)) / res;
            let span = half / res + 1.0;
            let lo = (centre_col - span).floor() as i64;
            let hi = (centre_col + span).ceil() as i64;
            if hi - lo + 1 >= width as i64 {
                columns.iter_mut().for_each(|col| col.push(k));
                continue;
            }
            for j in lo..=hi {
                columns[j.rem_euclid(width as i64) as usize].push(k);
            }
        }
        ColumnCulling {
            n_boxes: spec.boxes.len(),
            cones,
            columns,
        }
    }

    fn candidates(&self, col: usize, dir: &Vector3<f64>) -> (Vec<usize>, Vec<usize>) {
        let mut boxes = Vec::new();
        let mut cylinders = Vec::new();
        for &k in &self.columns[col] {
            let inside = match self.cones[k] {
                None => true,
                Some((axis, cos_alpha)) => axis.dot(dir) >= cos_alpha - 1e-12,
            };
            if inside {
                if k < self.n_boxes {
                    boxes.push(k);
                } else {
                    cylinders.push(k - self.n_boxes);
                }
            }
        }
        (boxes, cylinders)
    }
}

/// Deterministic scan of `spec` from the origin: same seed, same cloud.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<PointCloud> {
    Ok(spec.scan(seed, &Pose::identity())?.cloud)
}

fn ray_plane(p: &Plane, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let n = Vector3::from(p.normal);
    let denom = n.dot(d);
    if denom.abs() < 1e-12 {
        return None;
    }
    Some((p.offset - n.dot(o)) / denom)
}

fn box_local(b: &BoxPrimitive, p: &Vector3<f64>) -> Vector3<f64> {
    yaw_matrix(-b.yaw_deg.to_radians()) * (p - Vector3::from(b.center))
}

fn ray_box(b: &BoxPrimitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let rot = yaw_matrix(-b.yaw_deg.to_radians());
    let lo = box_local(b, o);
    let ld = rot * d;
    let h = Vector3::from(b.size) * 0.5;
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if ld[k].abs() < 1e-15 {
            if lo[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let t1 = (-h[k] - lo[k]) / ld[k];
        let t2 = (h[k] - lo[k]) / ld[k];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    if t_near > t_far || t_far <= MIN_HIT_DISTANCE {
        return None;
    }
    Some(if t_near > MIN_HIT_DISTANCE {
        t_near
    } else {
        t_far
    })
}

fn ray_cylinder(c: &Cylinder, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t > MIN_HIT_DISTANCE && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let ox = o[0] - c.center[0];
    let oy = o[1] - c.center[1];
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-15 {
        let b = 2.0 * (ox * d[0] + oy * d[1]);
        let cc = ox * ox + oy * oy - c.radius * c.radius;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                let z = o[2] + t * d[2];
                if z >= c.z_min && z <= c.z_max {
                    keep(t);
                }
            }
        }
    }
    if d[2].abs() > 1e-15 {
        for zc in [c.z_min, c.z_max] {
            let t = (zc - o[2]) / d[2];
            let x = ox + t * d[0];
            let y = oy + t * d[1];
            if x * x + y * y <= c.radius * c.radius {
                keep(t);
            }
        }
    }
    best
}

/// Sensor motion for a synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub frames: usize,
    /// Forward (+x) motion per frame, meters.
    pub forward: f64,
    /// Lateral (+y) motion per frame, meters.
    pub lateral: f64,
    pub yaw_per_frame_deg: f64,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            forward: 0.5,
            lateral: 0.0,
            yaw_per_frame_deg: 0.2,
            seed: 1,
        }
    }
}

impl SequenceConfig {
    /// Sensor motion between consecutive frames, expressed in the earlier
    /// sensor frame (maps frame k+1 coordinates into frame k).
    pub fn step(&self) -> Pose {
        Pose::from_yaw(
            self.yaw_per_frame_deg.to_radians(),
            Vector3::new(self.forward, self.lateral, 0.0),
        )
    }

    /// Ground-truth poses of every frame in frame 0 (KITTI convention).
    pub fn ground_truth(&self) -> Vec<Pose> {
        let step = self.step();
        let mut poses = Vec::with_capacity(self.frames);
        let mut cur = Pose::identity();
        for _ in 0..self.frames {
            poses.push(cur);
            cur = cur.compose(&step);
        }
        poses
    }
}

/// A generated sequence: scans (sensor frame) and their ground-truth poses.
pub struct Sequence {
    pub scans: Vec<Scan>,
    pub poses: Vec<Pose>,
}

/// Scans `scene` along the motion of `seq`. Frame `k` is scanned from
/// `poses[k]` with seed `seq.seed + k`, with dynamic boxes advanced `k` frames.
pub fn synth_sequence(scene: &SceneSpec, seq: &SequenceConfig) -> Result<Sequence> {
    if seq.frames == 0 {
        return Err(Error::Config("sequence needs at least one frame".into()));
    }
    let poses = seq.ground_truth();
    let scans = poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| {
            scene
                .at_frame(k)
                .scan(seq.seed.wrapping_add(k as u64), pose)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { scans, poses })
}

/// Procedural street scene spread over `[-40, length + 40]` m along x:
/// ground plane, building blocks with facade pilasters on both sides, street
/// furniture (cars, poles, bollards, signs, trees, bushes), curbs, low road
/// debris, dense small sidewalk clutter, and closing facades at both ends.
/// Dense small objects keep the range images textured enough for keypoint
/// matching; a bare street yields only a few dozen keypoints per scan.
pub fn urban_scene(seed: u64, length: f64, sensor_height: f64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground = -sensor_height;
    let mut spec = SceneSpec {
        planes: vec![Plane {
            normal: [0.0, 0.0, 1.0],
            offset: ground,
        }],
        ..Default::default()
    };
    let x_end = length + 40.0;
    let upright = |x: f64, y: f64, r: f64, h: f64| Cylinder {
        center: [x, y],
        radius: r,
        z_min: ground,
        z_max: ground + h,
    };
    let block = |c: [f64; 3], size: [f64; 3], yaw: f64| BoxPrimitive {
        center: c,
        size,
        yaw_deg: yaw,
        velocity: [0.0; 3],
    };
    for side in [-1.0f64, 1.0] {
        let mut x = -40.0;
        while x < x_end {
            let w = rng.random_range(4.0..12.0);
            let depth = rng.random_range(4.0..10.0);
            let h = rng.random_range(3.0..12.0);
            let face = side * rng.random_range(12.0..18.0);
            spec.boxes.push(block(
                [x + w / 2.0, face + side * depth / 2.0, ground + h / 2.0],
                [w, depth, h],
                0.0,
            ));
            let mut px = x + rng.random_range(0.3..1.5);
            while px < x + w - 0.5 {
                let ph = rng.random_range(0.8..h);
                spec.boxes.push(block(
                    [px, face - side * 0.2, ground + ph / 2.0],
                    [rng.random_range(0.3..0.8), 0.4, ph],
                    0.0,
                ));
                px += rng.random_range(1.2..3.0);
            }
            x += w + rng.random_range(1.0..6.0);
        }
        let mut x = -35.0;
        while x < x_end {
            let lateral = side * rng.random_range(3.5..8.5);
            match rng.random_range(0..6) {
                0 => {
                    let (len, wid) = (rng.random_range(3.8..4.8), rng.random_range(1.7..2.0));
                    let yaw = rng.random_range(-8.0..8.0);
                    let y = side * rng.random_range(4.5..6.0);
                    spec.boxes
                        .push(block([x, y, ground + 0.55], [len, wid, 0.8], yaw));
                    spec.boxes.push(block(
                        [x - 0.3, y, ground + 1.2],
                        [len * 0.5, wid * 0.85, 0.55],
                        yaw,
                    ));
                }
                1 => spec.cylinders.push(upright(
                    x,
                    lateral,
                    rng.random_range(0.12..0.3),
                    rng.random_range(3.0..7.0),
                )),
                2 => spec.cylinders.push(upright(
                    x,
                    lateral,
                    rng.random_range(0.1..0.2),
                    rng.random_range(0.6..1.2),
                )),
                3 => {
                    let h = rng.random_range(2.0..3.0);
                    spec.cylinders.push(upright(x, lateral, 0.05, h));
                    spec.boxes.push(block(
                        [x, lateral, ground + h + 0.3],
                        [0.1, rng.random_range(0.5..1.0), 0.6],
                        rng.random_range(-30.0..30.0),
                    ));
                }
                4 => {
                    let trunk = rng.random_range(2.0..3.5);
                    let crown = rng.random_range(1.5..3.0);
                    spec.cylinders
                        .push(upright(x, lateral, rng.random_range(0.15..0.35), trunk));
                    spec.boxes.push(block(
                        [x, lateral, ground + trunk + crown / 2.0],
                        [crown, crown, crown],
                        rng.random_range(0.0..90.0),
                    ));
                }
                _ => {
                    for _ in 0..rng.random_range(3..7) {
                        let s = rng.random_range(0.3..0.9);
                        spec.boxes.push(block(
                            [
                                x + rng.random_range(-1.0..1.0),
                                lateral + rng.random_range(-0.8..0.8),
                                ground + s / 2.0 + rng.random_range(0.0..0.4),
                            ],
                            [s, s * rng.random_range(0.6..1.4), s],
                            rng.random_range(0.0..90.0),
                        ));
                    }
                }
            }
            x += rng.random_range(0.8..2.0);
        }
        let mut x = -40.0;
        while x < x_end {
            let seg = rng.random_range(2.0..6.0);
            spec.boxes.push(block(
                [x + seg / 2.0, side * 3.2, ground + 0.075],
                [seg, 0.3, 0.15],
                0.0,
            ));
            x += seg + rng.random_range(0.5..2.0);
        }
    }
    let n_low = ((x_end + 40.0) * 3.0) as usize;
    for _ in 0..n_low {
        let s = rng.random_range(0.2..0.8);
        spec.boxes.push(block(
            [
                rng.random_range(-40.0..x_end),
                rng.random_range(-9.0..9.0),
                ground + 0.05,
            ],
            [
                s,
                s * rng.random_range(0.5..1.5),
                rng.random_range(0.05..0.25),
            ],
            rng.random_range(0.0..90.0),
        ));
    }
    let n_clutter = ((x_end + 40.0) * 12.0) as usize;
    for _ in 0..n_clutter {
        let x = rng.random_range(-40.0..x_end);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let y = side * rng.random_range(4.0..12.0);
        let h = rng.random_range(0.3..1.5);
        if rng.random_bool(0.5) {
            let w = rng.random_range(0.15..0.4);
            spec.boxes.push(block(
                [x, y, ground + h / 2.0],
                [w, w * rng.random_range(0.5..1.5), h],
                rng.random_range(0.0..90.0),
            ));
        } else {
            spec.cylinders
                .push(upright(x, y, rng.random_range(0.08..0.2), h));
        }
    }
    for end in [-45.0, x_end + 5.0] {
        let mut y = -20.0;
        while y < 20.0 {
            let w = rng.random_range(3.0..8.0);
            let h = rng.random_range(4.0..15.0);
            spec.boxes.push(block(
                [
                    end + rng.random_range(-2.0..2.0),
                    y + w / 2.0,
                    ground + h / 2.0,
                ],
                [4.0, w, h],
                0.0,
            ));
            y += w + rng.random_range(0.5..3.0);
        }
    }
    spec
}
