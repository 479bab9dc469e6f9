//! Datasets on disk and the synthetic scene generator.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! intrinsics.txt          fx, fy, cx, cy, width, height as `key = value`
//! meta.txt                near, far, scene box, timestamps, train/test split
//! frames/00000.ppm        colour, one file per frame
//! masks/00000.pgm         optional tool masks
//! depth/00000.bdep        optional reference depth
//! correspondences.txt     optional `frame_a frame_b u_a v_a u_b v_b confidence`
//! oracle/poses.txt        optional ground-truth camera-to-world poses
//! ```

mod formats;
mod synthetic;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::SceneBox;
use crate::geometry::{Intrinsics, SE3Pose};
use crate::rendering::Mask;

pub use formats::{
    read_bdep, read_depth, read_pgm, read_ppm, write_bdep, write_depth, write_pgm, write_ppm,
    DepthMap, GrayImage, Image, BDEP_MAGIC,
};
pub use synthetic::{
    generate_synthetic, CameraPath, CorrespondenceSpec, DeformationSpec, Surface, SyntheticScene,
    SyntheticSceneSpec, SyntheticSummary, TextureKind, TextureSpec, ToolSpec,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub tool_mask: Option<Mask>,
    pub ref_depth: Option<DepthMap>,
    /// Normalised to `[0, 1]`; `0` is the canonical state.
    pub time: f64,
    pub gt_pose: Option<SE3Pose>,
}

impl Frame {
    pub fn is_tool(&self, u: usize, v: usize) -> bool {
        self.tool_mask.as_ref().is_some_and(|m| m.get(u, v))
    }

    /// Reference depth at a continuous pixel, `None` when missing, invalid or
    /// under the tool mask.
    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let d = self.ref_depth.as_ref()?;
        if self.tool_mask.is_some() {
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (u1, v1) = (u.ceil() as usize, v.ceil() as usize);
            if [(u0, v0), (u1, v0), (u0, v1), (u1, v1)]
                .iter()
                .any(|&(a, b)| a < d.width && b < d.height && self.is_tool(a, b))
            {
                return None;
            }
        }
        d.sample(u, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrespondenceRecord {
    pub frame_a: usize,
    pub frame_b: usize,
    pub pixel_a: (f64, f64),
    pub pixel_b: (f64, f64),
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Holds out `max(1, round(n / 10))` evenly spaced interior frames.
    pub fn every_tenth(n: usize) -> Self {
        if n < 3 {
            return Self {
                train: (0..n).collect(),
                test: Vec::new(),
            };
        }
        let k = ((n as f64 / 10.0).round() as usize).max(1);
        let test: Vec<usize> = (1..=k)
            .map(|j| ((j as f64 * n as f64 / (k + 1) as f64).round() as usize).clamp(1, n - 2))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Self {
            train: (0..n).filter(|i| !test.contains(i)).collect(),
            test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub scene_box: SceneBox,
    pub split: Split,
    pub correspondences: Vec<CorrespondenceRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    near: f64,
    far: f64,
    scene_box: SceneBox,
    timestamps: Vec<f64>,
    split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Records with lower confidence are dropped.
    pub confidence_threshold: f64,
    /// Keep every `n`-th frame.
    pub subsample_every: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            subsample_every: 1,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        self.frames.iter().any(|f| f.ref_depth.is_some())
    }

    pub fn gt_poses(&self) -> Option<Vec<SE3Pose>> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.scene_box.validate()?;
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for (i, f) in self.frames.iter().enumerate() {
            if (f.image.width, f.image.height) != (w, h) {
                return Err(Error::invalid(format!(
                    "frame {i} is {}×{}, intrinsics say {w}×{h}",
                    f.image.width, f.image.height
                )));
            }
            if let Some(m) = &f.tool_mask {
                if (m.width, m.height) != (w, h) {
                    return Err(Error::invalid(format!("mask of frame {i} has the wrong resolution")));
                }
            }
            if let Some(d) = &f.ref_depth {
                if (d.width, d.height) != (w, h) {
                    return Err(Error::invalid(format!("depth of frame {i} has the wrong resolution")));
                }
            }
            if !(0.0..=1.0).contains(&f.time) {
                return Err(Error::invalid(format!("frame {i} time {} outside [0, 1]", f.time)));
            }
            if i > 0 && !(f.time > self.frames[i - 1].time) {
                return Err(Error::invalid(format!("timestamps not strictly increasing at frame {i}")));
            }
        }
        let n = self.frames.len();
        let mut seen = vec![false; n];
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= n || seen[i] {
                return Err(Error::invalid(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        for r in &self.correspondences {
            self.check_record(r).map_err(Error::invalid)?;
        }
        Ok(())
    }

    fn check_record(&self, r: &CorrespondenceRecord) -> std::result::Result<(), String> {
        let n = self.frames.len();
        if r.frame_a == r.frame_b || r.frame_a >= n || r.frame_b >= n {
            return Err(format!("bad frame pair ({}, {})", r.frame_a, r.frame_b));
        }
        let k = &self.intrinsics;
        if !k.contains(r.pixel_a.0, r.pixel_a.1) || !k.contains(r.pixel_b.0, r.pixel_b.1) {
            return Err("pixel outside image bounds".into());
        }
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(format!("confidence {} outside [0, 1]", r.confidence));
        }
        Ok(())
    }
}

fn frame_path(root: &Path, dir: &str, i: usize, ext: &str) -> std::path::PathBuf {
    root.join(dir).join(format!("{i:05}.{ext}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    write_text(&root.join("intrinsics.txt"), &ds.intrinsics.to_text())?;
    let meta = Meta {
        near: ds.near,
        far: ds.far,
        scene_box: ds.scene_box,
        timestamps: ds.times(),
        split: ds.split.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    write_text(&root.join("meta.txt"), &text)?;
    for (i, f) in ds.frames.iter().enumerate() {
        write_ppm(&frame_path(root, "frames", i, "ppm"), &f.image)?;
        if let Some(m) = &f.tool_mask {
            write_pgm(&frame_path(root, "masks", i, "pgm"), m)?;
        }
        if let Some(d) = &f.ref_depth {
            write_depth(&frame_path(root, "depth", i, "bdep"), d)?;
        }
    }
    if !ds.correspondences.is_empty() {
        let mut text = String::new();
        for r in &ds.correspondences {
            text += &format!(
                "{} {} {} {} {} {} {}\n",
                r.frame_a, r.frame_b, r.pixel_a.0, r.pixel_a.1, r.pixel_b.0, r.pixel_b.1, r.confidence
            );
        }
        write_text(&root.join("correspondences.txt"), &text)?;
    }
    if let Some(poses) = ds.gt_poses() {
        write_text(&root.join("oracle").join("poses.txt"), &poses_to_text(&poses))?;
    }
    Ok(())
}

pub fn poses_to_text(poses: &[SE3Pose]) -> String {
    let mut text = String::new();
    for (i, p) in poses.iter().enumerate() {
        text += &i.to_string();
        for v in p.to_12() {
            text += &format!(" {v}");
        }
        text.push('\n');
    }
    text
}

/// Parses `index` followed by 12 reals per line.
pub fn poses_from_text(text: &str, path: &Path) -> Result<Vec<(usize, SE3Pose)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", ln + 1));
        let mut it = line.split_whitespace();
        let idx: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected a frame index"))?;
        let vals: Vec<f64> = it
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("malformed number"))?;
        if vals.len() != 12 {
            return Err(bad("expected 12 pose values"));
        }
        out.push((idx, SE3Pose::from_12(&vals).map_err(|e| bad(&e.to_string()))?));
    }
    Ok(out)
}

fn parse_correspondences(text: &str, path: &Path) -> Result<Vec<CorrespondenceRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", ln + 1));
        if f.len() != 7 {
            return Err(bad("expected `frame_a frame_b u_a v_a u_b v_b confidence`"));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed frame index"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("malformed number"));
        out.push(CorrespondenceRecord {
            frame_a: idx(f[0])?,
            frame_b: idx(f[1])?,
            pixel_a: (num(f[2])?, num(f[3])?),
            pixel_b: (num(f[4])?, num(f[5])?),
            confidence: num(f[6])?,
        });
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_with(root, &LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if opts.subsample_every == 0 {
        return Err(Error::invalid("subsampling stride must be at least 1"));
    }
    let ipath = root.join("intrinsics.txt");
    let intrinsics = Intrinsics::from_text(&read_text(&ipath)?, &ipath)?;
    intrinsics
        .validate()
        .map_err(|e| Error::format(&ipath, e.to_string()))?;
    let mpath = root.join("meta.txt");
    let meta: Meta =
        toml::from_str(&read_text(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    for (i, w) in meta.timestamps.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::format(
                &mpath,
                format!("timestamps not strictly increasing at entry {}", i + 1),
            ));
        }
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut frames = Vec::with_capacity(meta.timestamps.len());
    for (i, &time) in meta.timestamps.iter().enumerate() {
        let p = frame_path(root, "frames", i, "ppm");
        let image = read_ppm(&p)?;
        if (image.width, image.height) != (w, h) {
            return Err(Error::format(&p, format!("resolution {}×{}, expected {w}×{h}", image.width, image.height)));
        }
        let p = frame_path(root, "masks", i, "pgm");
        let tool_mask = if p.exists() {
            let m = read_pgm(&p)?;
            if (m.width, m.height) != (w, h) {
                return Err(Error::format(&p, format!("resolution {}×{}, expected {w}×{h}", m.width, m.height)));
            }
            Some(m)
        } else {
            None
        };
        let p = frame_path(root, "depth", i, "bdep");
        let ref_depth = if p.exists() {
            let d = read_depth(&p)?;
            if (d.width, d.height) != (w, h) {
                return Err(Error::format(&p, format!("resolution {}×{}, expected {w}×{h}", d.width, d.height)));
            }
            Some(d)
        } else {
            None
        };
        frames.push(Frame {
            image,
            tool_mask,
            ref_depth,
            time,
            gt_pose: None,
        });
    }
    let ppath = root.join("oracle").join("poses.txt");
    if ppath.exists() {
        for (i, pose) in poses_from_text(&read_text(&ppath)?, &ppath)? {
            let f = frames
                .get_mut(i)
                .ok_or_else(|| Error::format(&ppath, format!("pose for unknown frame {i}")))?;
            f.gt_pose = Some(pose);
        }
    }
    let cpath = root.join("correspondences.txt");
    let mut correspondences = if cpath.exists() {
        parse_correspondences(&read_text(&cpath)?, &cpath)?
    } else {
        Vec::new()
    };
    let mut ds = Dataset {
        frames,
        intrinsics,
        near: meta.near,
        far: meta.far,
        scene_box: meta.scene_box,
        split: meta.split,
        correspondences: Vec::new(),
    };
    for (n, r) in correspondences.iter().enumerate() {
        ds.check_record(r)
            .map_err(|m| Error::format(&cpath, format!("record {}: {m}", n + 1)))?;
    }
    correspondences.retain(|r| r.confidence >= opts.confidence_threshold);
    ds.correspondences = correspondences;
    if opts.subsample_every > 1 {
        ds = subsample(ds, opts.subsample_every);
    }
    ds.validate()?;
    Ok(ds)
}

/// Keeps frames `0, n, 2n, …`, remapping split and correspondences. If the
/// held-out set vanishes the default split is recomputed.
pub fn subsample(ds: Dataset, every: usize) -> Dataset {
    let keep: Vec<usize> = (0..ds.frames.len()).step_by(every).collect();
    let remap = |i: usize| (i % every == 0).then_some(i / every);
    let mut split = Split {
        train: ds.split.train.iter().filter_map(|&i| remap(i)).collect(),
        test: ds.split.test.iter().filter_map(|&i| remap(i)).collect(),
    };
    if split.test.is_empty() || split.train.len() + split.test.len() != keep.len() {
        split = Split::every_tenth(keep.len());
    }
    let correspondences = ds
        .correspondences
        .iter()
        .filter_map(|r| {
            Some(CorrespondenceRecord {
                frame_a: remap(r.frame_a)?,
                frame_b: remap(r.frame_b)?,
                ..*r
            })
        })
        .collect();
    Dataset {
        frames: keep.iter().map(|&i| ds.frames[i].clone()).collect(),
        split,
        correspondences,
        ..ds
    }
}

/// Writes rendered colour and depth rasters as `{stem}.ppm` and `{stem}.bdep`.
pub fn export_renders(dir: &Path, stem: &str, color: &Image, depth: Option<&DepthMap>) -> Result<()> {
    if !color.data.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("render `{stem}` contains non-finite colour")));
    }
    if let Some(d) = depth {
        if !d.data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("render `{stem}` contains non-finite depth")));
        }
    }
    write_ppm(&dir.join(format!("{stem}.ppm")), color)?;
    if let Some(d) = depth {
        write_depth(&dir.join(format!("{stem}.bdep")), d)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_holds_out_interior_frames() {
        let s = Split::every_tenth(16);
        assert_eq!(s.test, vec![5, 11]);
        assert_eq!(s.train.len(), 14);
        let s = Split::every_tenth(10);
        assert_eq!(s.test, vec![5]);
        let s = Split::every_tenth(3);
        assert_eq!(s.test, vec![1]);
    }

    #[test]
    fn correspondence_parse_reports_line() {
        let text = "0 1 1 2 3 4 0.9\n\n0 1 1 2 3\n";
        let err = parse_correspondences(text, Path::new("c.txt")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn pose_text_round_trip() {
        let p = SE3Pose {
            rotation: crate::geometry::axis_angle(nalgebra::Vector3::new(0.3, -1.0, 0.2), 0.17),
            translation: nalgebra::Vector3::new(0.1, -0.25, 1.0 / 3.0),
        };
        let text = poses_to_text(&[SE3Pose::identity(), p]);
        let back = poses_from_text(&text, Path::new("p.txt")).unwrap();
        assert_eq!(back[1].1, p);
    }

    fn scene_dir() -> tempfile::TempDir {
        let mut spec =
            SyntheticSceneSpec::from_toml(include_str!("../../presets/deformable.toml")).unwrap();
        spec.frame_count = 10;
        spec.width = 20;
        spec.height = 15;
        spec.focal = 16.0;
        spec.correspondences.per_pair = 4;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        generate_synthetic(&spec, &mut rng, dir.path()).unwrap();
        dir
    }

    #[test]
    fn ten_frame_export_loads() {
        let dir = scene_dir();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.split.test, vec![5]);
        assert!(ds.gt_poses().is_some());
    }

    #[test]
    fn wrong_depth_resolution_names_the_file() {
        let dir = scene_dir();
        let p = dir.path().join("depth").join("00003.bdep");
        write_depth(&p, &DepthMap { width: 3, height: 3, data: vec![1.0; 9] }).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00003.bdep"), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let dir = scene_dir();
        let p = dir.path().join("meta.txt");
        let text = fs::read_to_string(&p).unwrap();
        let mut meta: Meta = toml::from_str(&text).unwrap();
        meta.timestamps.swap(2, 3);
        fs::write(&p, toml::to_string(&meta).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("meta.txt"), "{err}");
    }

    #[test]
    fn missing_intrinsics_rejected() {
        let dir = scene_dir();
        fs::remove_file(dir.path().join("intrinsics.txt")).unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("intrinsics.txt"));
    }

    #[test]
    fn low_confidence_records_filtered() {
        let dir = scene_dir();
        let p = dir.path().join("correspondences.txt");
        let mut text = fs::read_to_string(&p).unwrap();
        let before = text.lines().count();
        text += "0 1 2 2 3 3 0.3\n";
        fs::write(&p, text).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.correspondences.len(), before);
        assert!(ds.correspondences.iter().all(|r| r.confidence >= 0.5));
        let all = load_dataset_with(dir.path(), &LoadOptions { confidence_threshold: 0.0, subsample_every: 1 }).unwrap();
        assert_eq!(all.correspondences.len(), before + 1);
    }

    #[test]
    fn subsampling_keeps_every_nth_frame() {
        let dir = scene_dir();
        let full = load_dataset(dir.path()).unwrap();
        let ds = load_dataset_with(dir.path(), &LoadOptions { confidence_threshold: 0.5, subsample_every: 3 }).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.frames[1], full.frames[3]);
        assert!(ds.correspondences.iter().all(|r| r.frame_a < 4 && r.frame_b < 4));
        assert!(!ds.split.test.is_empty());
    }

    #[test]
    fn export_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(2, 2);
        img.data[0] = f64::NAN;
        assert!(export_renders(dir.path(), "x", &img, None).is_err());
    }
}
