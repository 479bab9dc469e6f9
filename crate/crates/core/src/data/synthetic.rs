//! Analytic deformable scenes with exact colour, depth, poses and
//! correspondences.
//!
//! A material point `X` on the canonical surface moves to
//! `X + A (sin(ω t + φ(X)) − sin φ(X)) n̂(X)` at time `t`, with
//! `φ(X) = k ⟨p̂, X⟩` and `n̂` the outward surface normal, so `t = 0` is the
//! canonical state. Colour is attached to material points.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    save_dataset, write_bdep, write_text, CorrespondenceRecord, Dataset, DepthMap, Frame, Image,
    Split,
};
use crate::error::{Error, Result};
use crate::fields::SceneBox;
use crate::geometry::{axis_angle, generate_ray, project, rotation_angle, Intrinsics, SE3Pose};
use crate::rendering::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surface {
    /// The plane `z = depth`, facing the origin.
    Plane { depth: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationSpec {
    pub amplitude: f64,
    /// Temporal angular frequency over the normalised sequence time.
    pub omega: f64,
    /// Spatial wavenumber `k` of the phase field.
    pub wavenumber: f64,
    pub phase_direction: [f64; 3],
}

impl Default for DeformationSpec {
    fn default() -> Self {
        Self {
            amplitude: 0.0,
            omega: 2.0 * PI,
            wavenumber: 1.5,
            phase_direction: [0.8, 0.6, 0.0],
        }
    }
}

/// Camera-to-world trajectory over normalised time `s`:
/// rotation `Rz(c sin 1.5πs) Ry(b sin 2πs) Rx(a sin πs)` with
/// `rotation_deg = [a, b, c]`, translation
/// `(tx sin 2πs, ty sin πs, tz sin 1.5πs)`. Frame 0 is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPath {
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            translation: [0.0; 3],
        }
    }
}

impl CameraPath {
    pub fn pose(&self, s: f64) -> SE3Pose {
        let [a, b, c] = self.rotation_deg.map(f64::to_radians);
        let [tx, ty, tz] = self.translation;
        let rotation = axis_angle(Vector3::z(), c * (1.5 * PI * s).sin())
            * axis_angle(Vector3::y(), b * (2.0 * PI * s).sin())
            * axis_angle(Vector3::x(), a * (PI * s).sin());
        SE3Pose {
            rotation,
            translation: Vector3::new(
                tx * (2.0 * PI * s).sin(),
                ty * (PI * s).sin(),
                tz * (1.5 * PI * s).sin(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Sinusoid,
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Sinusoids per channel.
    pub components: usize,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
    pub checker_size: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            kind: TextureKind::Sinusoid,
            components: 6,
            min_wavelength: 0.8,
            max_wavelength: 3.0,
            checker_size: 0.5,
        }
    }
}

/// A grey rectangle along the bottom edge sweeping left to right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolSpec {
    pub width_fraction: f64,
    pub height_fraction: f64,
    pub gray: f64,
}

impl Default for ToolSpec {
    fn default() -> Self {
        Self {
            width_fraction: 0.25,
            height_fraction: 0.4,
            gray: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceSpec {
    pub per_pair: usize,
    /// Largest frame gap between the two frames of a record; 0 for any.
    pub max_gap: usize,
}

impl Default for CorrespondenceSpec {
    fn default() -> Self {
        Self {
            per_pair: 48,
            max_gap: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub surface: Surface,
    #[serde(default)]
    pub deformation: DeformationSpec,
    #[serde(default)]
    pub camera_path: CameraPath,
    #[serde(default)]
    pub texture: TextureSpec,
    #[serde(default)]
    pub tool: Option<ToolSpec>,
    #[serde(default)]
    pub correspondences: CorrespondenceSpec,
}

impl SyntheticSceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.frame_count < 1 || self.width < 2 || self.height < 2 {
            return bad("need at least one frame of at least 2×2 pixels".into());
        }
        if !(self.focal > 0.0) || !(self.near > 0.0 && self.far > self.near) {
            return bad(format!(
                "need focal > 0 and 0 < near < far, got {} {} {}",
                self.focal, self.near, self.far
            ));
        }
        let a = self.deformation.amplitude;
        let p = self.deformation.phase_direction;
        if !a.is_finite() || !self.deformation.omega.is_finite() || !self.deformation.wavenumber.is_finite() {
            return bad("deformation parameters must be finite".into());
        }
        if p.iter().map(|v| v * v).sum::<f64>() == 0.0 && self.deformation.wavenumber != 0.0 {
            return bad("phase direction must be non-zero".into());
        }
        match self.surface {
            Surface::Plane { depth } => {
                if !(depth - 2.0 * a.abs() > self.near && depth + 2.0 * a.abs() < self.far) {
                    return bad(format!(
                        "plane at depth {depth} with displacement up to {} leaves [near, far]",
                        2.0 * a.abs()
                    ));
                }
            }
            Surface::Sphere { radius, .. } => {
                if !(radius > 2.0 * a.abs()) {
                    return bad(format!("sphere radius {radius} must exceed twice the amplitude"));
                }
            }
        }
        let t = &self.texture;
        if t.components == 0 || !(t.min_wavelength > 0.0 && t.max_wavelength >= t.min_wavelength) || !(t.checker_size > 0.0) {
            return bad("texture needs components ≥ 1 and positive wavelengths".into());
        }
        if let Some(tool) = &self.tool {
            if !(tool.width_fraction > 0.0 && tool.width_fraction < 1.0)
                || !(tool.height_fraction > 0.0 && tool.height_fraction < 1.0)
            {
                return bad("tool fractions must lie in (0, 1)".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSummary {
    pub frames: usize,
    pub correspondences: usize,
    pub static_scene: bool,
    pub miss_fraction: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
}

#[derive(Clone, Debug)]
struct Texture {
    /// Per channel: (direction · 2π / wavelength, phase, amplitude).
    waves: [Vec<(Vector3<f64>, f64, f64)>; 3],
    checker: [[f64; 3]; 2],
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub dataset: Dataset,
    /// Canonical material point of every correspondence record.
    pub canonical_points: Vec<[f64; 3]>,
    /// Exact camera-frame depths `(z_a, z_b)` of every record.
    pub record_depths: Vec<(f64, f64)>,
    pub miss_fraction: f64,
    texture: Texture,
}

struct Raster {
    image: Image,
    mask: Option<Mask>,
    depth: DepthMap,
    misses: usize,
    max_distance: f64,
    min_distance: f64,
}

impl SyntheticScene {
    pub fn build(spec: &SyntheticSceneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let texture = Self::make_texture(&spec.texture, rng);
        let n = spec.frame_count;
        let times: Vec<f64> = (0..n)
            .map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 })
            .collect();
        let poses: Vec<SE3Pose> = times.iter().map(|&s| spec.camera_path.pose(s)).collect();
        let intr = spec.intrinsics();
        let mut scene = Self {
            spec: spec.clone(),
            dataset: Dataset {
                frames: Vec::new(),
                intrinsics: intr,
                near: spec.near,
                far: spec.far,
                scene_box: frustum_box(&intr, &poses, spec.near, spec.far),
                split: Split::every_tenth(n),
                correspondences: Vec::new(),
            },
            canonical_points: Vec::new(),
            record_depths: Vec::new(),
            miss_fraction: 0.0,
            texture,
        };
        let rasters: Vec<Raster> = (0..n)
            .into_par_iter()
            .map(|i| scene.rasterize(&poses[i], times[i], true))
            .collect();
        let total = (intr.width * intr.height) as f64;
        let mut misses = 0;
        for (i, r) in rasters.into_iter().enumerate() {
            if r.misses as f64 > 0.5 * total {
                return Err(Error::invalid(format!(
                    "rays miss the surface for {} of {} pixels in frame {i}; framing is degenerate",
                    r.misses, total
                )));
            }
            if r.misses < (total as usize) && (r.min_distance < spec.near || r.max_distance > spec.far) {
                return Err(Error::invalid(format!(
                    "surface in frame {i} spans ray distances [{}, {}], outside [near, far]",
                    r.min_distance, r.max_distance
                )));
            }
            misses += r.misses;
            scene.dataset.frames.push(Frame {
                image: r.image.quantized(),
                tool_mask: r.mask,
                ref_depth: Some(r.depth),
                time: times[i],
                gt_pose: Some(poses[i]),
            });
        }
        scene.miss_fraction = misses as f64 / (total * n as f64);
        scene.make_correspondences(rng);
        Ok(scene)
    }

    fn make_texture(spec: &TextureSpec, rng: &mut impl Rng) -> Texture {
        let amp = 0.15 * (2.0 / spec.components as f64).sqrt();
        let waves = std::array::from_fn(|_| {
            (0..spec.components)
                .map(|_| {
                    let theta = rng.random::<f64>() * 2.0 * PI;
                    let z = rng.random::<f64>() * 0.6 - 0.3;
                    let dir = Vector3::new(theta.cos(), theta.sin(), z).normalize();
                    let wl = spec.min_wavelength + rng.random::<f64>() * (spec.max_wavelength - spec.min_wavelength);
                    (dir * (2.0 * PI / wl), rng.random::<f64>() * 2.0 * PI, amp)
                })
                .collect()
        });
        let checker = std::array::from_fn(|_| std::array::from_fn(|_| 0.15 + 0.7 * rng.random::<f64>()));
        Texture { waves, checker }
    }

    pub fn color(&self, x: &Vector3<f64>) -> [f64; 3] {
        match self.spec.texture.kind {
            TextureKind::Sinusoid => std::array::from_fn(|c| {
                let s: f64 = self.texture.waves[c]
                    .iter()
                    .map(|(k, ph, a)| a * (k.dot(x) + ph).sin())
                    .sum();
                0.5 + 0.45 * (s / 0.45).tanh()
            }),
            TextureKind::Checker => {
                let q = self.spec.texture.checker_size;
                let parity = (x / q).map(f64::floor).sum().rem_euclid(2.0) as usize;
                self.texture.checker[parity]
            }
        }
    }

    fn normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match &self.spec.surface {
            Surface::Plane { .. } => -Vector3::z(),
            Surface::Sphere { center, .. } => (x - Vector3::from(*center)).normalize(),
        }
    }

    fn height(&self, x: &Vector3<f64>, t: f64) -> f64 {
        let d = &self.spec.deformation;
        if d.amplitude == 0.0 || t == 0.0 {
            return 0.0;
        }
        let phi = d.wavenumber * Vector3::from(d.phase_direction).dot(x);
        d.amplitude * ((d.omega * t + phi).sin() - phi.sin())
    }

    /// Displacement of canonical material point `x` at time `t`.
    pub fn displacement(&self, x: &Vector3<f64>, t: f64) -> Vector3<f64> {
        self.normal(x) * self.height(x, t)
    }

    /// First intersection of a unit-direction ray with the surface at time
    /// `t`: ray distance and canonical material point.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: f64) -> Option<(f64, Vector3<f64>)> {
        const ITERS: usize = 200;
        match &self.spec.surface {
            Surface::Plane { depth } => {
                if !(d.z > 0.0) || o.z >= *depth {
                    return None;
                }
                let mut s = (depth - o.z) / d.z;
                for _ in 0..ITERS {
                    let p = o + d * s;
                    let x = Vector3::new(p.x, p.y, *depth);
                    let next = (depth - self.height(&x, t) - o.z) / d.z;
                    if next == s || (next - s).abs() <= 1e-15 * s {
                        s = next;
                        break;
                    }
                    s = next;
                }
                let p = o + d * s;
                Some((s, Vector3::new(p.x, p.y, *depth)))
            }
            Surface::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                if oc.norm() <= radius + 2.0 * self.spec.deformation.amplitude.abs() {
                    return None;
                }
                let hit = |r: f64| {
                    let b = oc.dot(d);
                    let disc = b * b - (oc.norm_squared() - r * r);
                    (disc >= 0.0).then(|| -b - disc.sqrt()).filter(|s| *s > 0.0)
                };
                let mut s = hit(*radius)?;
                let mut x = c + (o + d * s - c).normalize() * *radius;
                for _ in 0..ITERS {
                    let next = hit(radius + self.height(&x, t))?;
                    x = c + (o + d * next - c).normalize() * *radius;
                    let done = (next - s).abs() <= 1e-15 * next;
                    s = next;
                    if done {
                        break;
                    }
                }
                Some((s, x))
            }
        }
    }

    fn tool_rect(&self, t: f64) -> Option<(usize, usize, usize, usize)> {
        let tool = self.spec.tool.as_ref()?;
        let (w, h) = (self.spec.width, self.spec.height);
        let tw = ((w as f64 * tool.width_fraction).round() as usize).clamp(1, w);
        let th = ((h as f64 * tool.height_fraction).round() as usize).clamp(1, h);
        let left = (t * (w - tw) as f64).round() as usize;
        Some((left, left + tw, h - th, h))
    }

    fn rasterize(&self, pose: &SE3Pose, t: f64, with_tool: bool) -> Raster {
        let intr = self.spec.intrinsics();
        let (w, h) = (intr.width, intr.height);
        let mut image = Image::new(w, h);
        let mut depth = DepthMap {
            width: w,
            height: h,
            data: vec![0.0; w * h],
        };
        let rect = if with_tool { self.tool_rect(t) } else { None };
        let mut mask = rect.map(|_| Mask::empty(w, h));
        let (mut misses, mut lo, mut hi) = (0, f64::INFINITY, 0.0f64);
        for v in 0..h {
            for u in 0..w {
                let ray = generate_ray(&intr, pose, (u as f64, v as f64), 0, t).expect("pixel inside image");
                match self.intersect(&ray.origin, &ray.direction, t) {
                    Some((s, x)) => {
                        lo = lo.min(s);
                        hi = hi.max(s);
                        image.set_pixel(u, v, self.color(&x));
                        let z = pose.inverse_transform(&(ray.origin + ray.direction * s)).z;
                        depth.data[v * w + u] = z as f32;
                    }
                    None => misses += 1,
                }
                if let (Some((x0, x1, y0, y1)), Some(m)) = (rect, mask.as_mut()) {
                    if (x0..x1).contains(&u) && (y0..y1).contains(&v) {
                        m.data[v * w + u] = true;
                        let g = self.spec.tool.as_ref().map_or(0.6, |tool| tool.gray);
                        image.set_pixel(u, v, [g; 3]);
                        depth.data[v * w + u] = 0.0;
                    }
                }
            }
        }
        Raster {
            image,
            mask,
            depth,
            misses,
            max_distance: hi,
            min_distance: lo,
        }
    }

    /// Exact colour and camera-frame depth from an arbitrary camera at time
    /// `t`, without the tool overlay.
    pub fn render(&self, pose: &SE3Pose, t: f64) -> (Image, DepthMap) {
        let r = self.rasterize(pose, t, false);
        (r.image, r.depth)
    }

    fn make_correspondences(&mut self, rng: &mut impl Rng) {
        let ds = &self.dataset;
        let intr = ds.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let n = ds.frames.len();
        let mut records = Vec::new();
        let mut points = Vec::new();
        let mut depths = Vec::new();
        let per_pair = self.spec.correspondences.per_pair;
        let gap = self.spec.correspondences.max_gap;
        for a in 0..n {
            for b in a + 1..n {
                if gap > 0 && b - a > gap {
                    continue;
                }
                let (fa, fb) = (&ds.frames[a], &ds.frames[b]);
                let (pa, pb) = (fa.gt_pose.unwrap(), fb.gt_pose.unwrap());
                let mut found = 0;
                for _ in 0..per_pair * 8 {
                    if found == per_pair {
                        break;
                    }
                    let (u, v) = (rng.random_range(0..w), rng.random_range(0..h));
                    if fa.depth_at(u as f64, v as f64).is_none() {
                        continue;
                    }
                    let ray = generate_ray(&intr, &pa, (u as f64, v as f64), a, fa.time).unwrap();
                    let Some((_, x)) = self.intersect(&ray.origin, &ray.direction, fa.time) else { continue };
                    let world_b = x + self.displacement(&x, fb.time);
                    let (ub, vb, zb) = project(&intr, &pb, &world_b);
                    if !(zb > 0.0) || !intr.contains(ub, vb) || fb.depth_at(ub, vb).is_none() {
                        continue;
                    }
                    let ray_b = generate_ray(&intr, &pb, (ub, vb), b, fb.time).unwrap();
                    let expected = (world_b - ray_b.origin).norm();
                    match self.intersect(&ray_b.origin, &ray_b.direction, fb.time) {
                        Some((s, _)) if (s - expected).abs() <= 1e-6 * expected => {}
                        _ => continue,
                    }
                    let exact_a = pa.inverse_transform(&(x + self.displacement(&x, fa.time))).z;
                    records.push(CorrespondenceRecord {
                        frame_a: a,
                        frame_b: b,
                        pixel_a: (u as f64, v as f64),
                        pixel_b: (ub, vb),
                        confidence: 1.0,
                    });
                    points.push([x.x, x.y, x.z]);
                    depths.push((exact_a, zb));
                    found += 1;
                }
            }
        }
        self.dataset.correspondences = records;
        self.canonical_points = points;
        self.record_depths = depths;
    }

    /// Writes the dataset plus `oracle/canonical_points.bdep` (one record per
    /// column, three channels) and `oracle/record_depths.bdep` (two channels).
    pub fn save(&self, root: &Path) -> Result<SyntheticSummary> {
        save_dataset(root, &self.dataset)?;
        let m = self.canonical_points.len();
        let pts: Vec<f32> = self.canonical_points.iter().flatten().map(|&v| v as f32).collect();
        write_bdep(&root.join("oracle").join("canonical_points.bdep"), m, 1, 3, &pts)?;
        let zs: Vec<f32> = self
            .record_depths
            .iter()
            .flat_map(|&(a, b)| [a as f32, b as f32])
            .collect();
        write_bdep(&root.join("oracle").join("record_depths.bdep"), m, 1, 2, &zs)?;
        let spec = toml::to_string(&self.spec).map_err(|e| Error::invalid(e.to_string()))?;
        write_text(&root.join("oracle").join("spec.toml"), &spec)?;
        Ok(self.summary())
    }

    pub fn summary(&self) -> SyntheticSummary {
        let poses = self.dataset.gt_poses().unwrap_or_default();
        SyntheticSummary {
            frames: self.dataset.frames.len(),
            correspondences: self.dataset.correspondences.len(),
            static_scene: self.spec.deformation.amplitude == 0.0,
            miss_fraction: self.miss_fraction,
            max_rotation_deg: poses
                .iter()
                .map(|p| rotation_angle(&p.rotation).to_degrees())
                .fold(0.0, f64::max),
            max_translation: poses.iter().map(|p| p.translation.norm()).fold(0.0, f64::max),
        }
    }
}

/// Axis-aligned bounds of every camera frustum between `near` and `far`,
/// padded by 5%.
fn frustum_box(intr: &Intrinsics, poses: &[SE3Pose], near: f64, far: f64) -> SceneBox {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let (w, h) = ((intr.width - 1) as f64, (intr.height - 1) as f64);
    for p in poses {
        for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let d = intr.camera_direction(u, v).normalize();
            for s in [near, far] {
                let x = p.transform(&(d * s));
                lo = lo.inf(&x);
                hi = hi.sup(&x);
            }
        }
    }
    let pad = (hi - lo) * 0.05;
    SceneBox {
        min: (lo - pad).into(),
        max: (hi + pad).into(),
    }
}

/// Builds the scene and writes it under `root`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, rng: &mut impl Rng, root: &Path) -> Result<SyntheticSummary> {
    let scene = SyntheticScene::build(spec, rng)?;
    scene.save(root)
}
