//! Pinhole intrinsics, the learnable 9-parameter pose layer, rays and
//! backprojection.
//!
//! Poses are camera-to-world. The camera looks down its +z axis and pixel
//! coordinates are `(u, v) = (column, row)` with integer values at pixel
//! centres.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Camera-frame direction with unit z: `((u−cx)/fx, (v−cy)/fy, 1)`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn to_text(&self) -> String {
        format!(
            "fx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\nwidth = {}\nheight = {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let intr: Intrinsics =
            toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        intr.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(intr)
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// The 9-parameter row: first two rotation rows then the translation.
    pub fn to_row(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    /// Row-major rotation followed by translation.
    pub fn to_12(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.rotation[(i, j)];
            }
            out[9 + i] = self.translation[i];
        }
        out
    }

    pub fn from_12(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::invalid(format!("pose needs 12 values, got {}", v.len())));
        }
        Ok(Self {
            rotation: Matrix3::from_row_slice(&v[..9]),
            translation: Vector3::new(v[9], v[10], v[11]),
        })
    }
}

/// Learnable `N × 9` pose layer, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub values: Tensor,
}

pub const IDENTITY_ROW: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

impl PoseParams {
    pub fn identity(frames: usize) -> Self {
        let data = (0..frames).flat_map(|_| IDENTITY_ROW).collect();
        Self {
            values: Tensor::from_parts(vec![frames, 9], data),
        }
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        match values.shape() {
            [_, 9] => Ok(Self { values }),
            s => Err(Error::invalid(format!("pose layer must be N×9, got {s:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values.data()[frame * 9..(frame + 1) * 9]
    }

    pub fn set_row(&mut self, frame: usize, row: &[f64; 9]) {
        self.values.data_mut()[frame * 9..(frame + 1) * 9].copy_from_slice(row);
    }

    pub fn pose(&self, frame: usize) -> Result<SE3Pose> {
        pose_to_se3(self.row(frame), frame)
    }

    pub fn poses(&self) -> Result<Vec<SE3Pose>> {
        (0..self.frames()).map(|i| self.pose(i)).collect()
    }
}

/// Gram-Schmidt completion of a 9-parameter pose row.
pub fn pose_to_se3(row: &[f64], frame: usize) -> Result<SE3Pose> {
    if row.len() != 9 {
        return Err(Error::invalid(format!("pose row has {} entries", row.len())));
    }
    let a = Vector3::new(row[0], row[1], row[2]);
    let b = Vector3::new(row[3], row[4], row[5]);
    let na = a.norm();
    if !(na >= DEGENERATE_NORM) {
        return Err(Error::DegeneratePose {
            frame,
            reason: "first rotation row has vanishing norm",
        });
    }
    let r1 = a / na;
    let b_perp = b - r1 * b.dot(&r1);
    let nb = b_perp.norm();
    if !(nb >= DEGENERATE_NORM) {
        return Err(Error::DegeneratePose {
            frame,
            reason: "second rotation row is parallel to the first",
        });
    }
    let r2 = b_perp / nb;
    let r3 = r1.cross(&r2);
    Ok(SE3Pose {
        rotation: Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]),
        translation: Vector3::new(row[6], row[7], row[8]),
    })
}

/// Differentiable rotation rows and translation for a batch of frames.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    /// Rotation rows, each `[n, 3]`.
    pub rows: [Var; 3],
    pub translation: Var,
}

/// Gathers pose rows for `frames` from the `[N, 9]` pose variable and
/// completes them on the tape. Degenerate rows are rejected before recording.
pub fn poses_on_tape(tape: &mut Tape, pose_layer: Var, frames: &[usize]) -> Result<PoseVars> {
    {
        let values = tape.value(pose_layer);
        let data = values.data();
        let mut seen = vec![false; values.shape()[0]];
        for &f in frames {
            if f >= seen.len() {
                return Err(Error::invalid(format!("frame {f} outside pose layer")));
            }
            if !seen[f] {
                pose_to_se3(&data[f * 9..(f + 1) * 9], f)?;
                seen[f] = true;
            }
        }
    }
    let p = tape.gather_rows(pose_layer, frames)?;
    let a = tape.select_cols(p, &[0, 1, 2])?;
    let b = tape.select_cols(p, &[3, 4, 5])?;
    let translation = tape.select_cols(p, &[6, 7, 8])?;
    let r1 = normalize_rows(tape, a)?;
    let proj = tape.mul(b, r1)?;
    let proj = tape.sum_cols(proj)?;
    let along = tape.mul_broadcast(r1, proj)?;
    let b_perp = tape.sub(b, along)?;
    let r2 = normalize_rows(tape, b_perp)?;
    let r3 = cross_rows(tape, r1, r2)?;
    Ok(PoseVars {
        rows: [r1, r2, r3],
        translation,
    })
}

fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x);
    let n2 = tape.sum_cols(sq)?;
    let n = tape.sqrt(n2);
    let inv = tape.reciprocal(n);
    tape.mul_broadcast(x, inv)
}

fn cross_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ac: Vec<Var> = (0..3).map(|j| tape.col(a, j)).collect::<Result<_>>()?;
    let bc: Vec<Var> = (0..3).map(|j| tape.col(b, j)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(3);
    for (i, j) in [(1, 2), (2, 0), (0, 1)] {
        let l = tape.mul(ac[i], bc[j])?;
        let r = tape.mul(ac[j], bc[i])?;
        out.push(tape.sub(l, r)?);
    }
    tape.concat_cols(&out)
}

/// `R · p` for per-row rotations and `[n, 3]` vectors.
pub fn rotate_on_tape(tape: &mut Tape, pose: &PoseVars, p: Var) -> Result<Var> {
    let mut comps = Vec::with_capacity(3);
    for &row in &pose.rows {
        let prod = tape.mul(row, p)?;
        comps.push(tape.sum_cols(prod)?);
    }
    tape.concat_cols(&comps)
}

/// `R · p + t` for per-row poses and `[n, 3]` camera-frame points.
pub fn transform_on_tape(tape: &mut Tape, pose: &PoseVars, p: Var) -> Result<Var> {
    let rotated = rotate_on_tape(tape, pose, p)?;
    tape.add(rotated, pose.translation)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub frame_index: usize,
    pub pixel: (f64, f64),
    pub time: f64,
}

pub fn generate_ray(
    intr: &Intrinsics,
    pose: &SE3Pose,
    pixel: (f64, f64),
    frame: usize,
    time: f64,
) -> Result<Ray> {
    let (u, v) = pixel;
    if !intr.contains(u, v) {
        return Err(Error::invalid(format!("pixel ({u}, {v}) outside image")));
    }
    let d = pose.rotation * intr.camera_direction(u, v);
    Ok(Ray {
        origin: pose.translation,
        direction: d.normalize(),
        frame_index: frame,
        pixel,
        time,
    })
}

/// World point of pixel `(u, v)` at camera-frame depth `z`.
pub fn backproject(
    intr: &Intrinsics,
    pose: &SE3Pose,
    pixel: (f64, f64),
    depth: f64,
    frame: usize,
) -> Result<Vector3<f64>> {
    let (u, v) = pixel;
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth {
            frame,
            u,
            v,
            depth,
        });
    }
    Ok(pose.transform(&(intr.camera_direction(u, v) * depth)))
}

/// Pixel coordinates and camera-frame depth of a world point.
pub fn project(intr: &Intrinsics, pose: &SE3Pose, world: &Vector3<f64>) -> (f64, f64, f64) {
    let c = pose.inverse_transform(world);
    (
        intr.fx * c.x / c.z + intr.cx,
        intr.fy * c.y / c.z + intr.cy,
        c.z,
    )
}

/// Geodesic angle of a rotation, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    (0.5 * skew.norm()).atan2(0.5 * (r.trace() - 1.0))
}

/// Rotation about a unit axis.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::AlignmentFailed("need at least 3 paired points"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_src = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        cov_src += cs * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let spread = cov_src.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 1e-18) || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::AlignmentFailed("camera centres are collinear"));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let d = svd.singular_values;
    let trace = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let scale = trace / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    /// Mean geodesic rotation error in degrees.
    pub rotation_deg: f64,
    /// Mean camera-centre distance after similarity alignment (reference units).
    pub translation: f64,
}

pub fn pose_error(estimated: &[SE3Pose], reference: &[SE3Pose]) -> Result<PoseError> {
    if estimated.len() != reference.len() {
        return Err(Error::invalid(format!(
            "pose lists differ in length: {} vs {}",
            estimated.len(),
            reference.len()
        )));
    }
    let src: Vec<_> = estimated.iter().map(SE3Pose::center).collect();
    let dst: Vec<_> = reference.iter().map(SE3Pose::center).collect();
    let sim = umeyama(&src, &dst)?;
    let n = estimated.len() as f64;
    let mut rot = 0.0;
    let mut trans = 0.0;
    for (e, r) in estimated.iter().zip(reference) {
        let aligned = sim.rotation * e.rotation;
        rot += rotation_angle(&(r.rotation.transpose() * aligned)).to_degrees();
        trans += (sim.apply(&e.center()) - r.center()).norm();
    }
    Ok(PoseError {
        rotation_deg: rot / n,
        translation: trans / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 40.0,
            fy: 42.0,
            cx: 23.5,
            cy: 17.5,
            width: 48,
            height: 36,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> SE3Pose {
        let row: [f64; 9] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        pose_to_se3(&row, 0).unwrap()
    }

    #[test]
    fn identity_row_gives_identity() {
        let p = pose_to_se3(&IDENTITY_ROW, 0).unwrap();
        assert_eq!(p, SE3Pose::identity());
        let p = pose_to_se3(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn random_rows_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = random_pose(&mut rng).rotation;
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_rows_name_the_frame() {
        let err = pose_to_se3(&[0.0; 9], 7).unwrap_err();
        assert!(matches!(err, Error::DegeneratePose { frame: 7, .. }));
        let err = pose_to_se3(&[1.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap_err();
        assert!(matches!(err, Error::DegeneratePose { frame: 2, .. }));
    }

    #[test]
    fn principal_point_ray_looks_down_z() {
        let k = intr();
        let ray = generate_ray(&k, &SE3Pose::identity(), (k.cx, k.cy), 0, 0.0).unwrap();
        assert_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        let k = Intrinsics { fx: 20.0, ..k };
        let ray = generate_ray(&k, &SE3Pose::identity(), (k.cx + k.fx, k.cy), 0, 0.0).unwrap();
        assert!((ray.direction - Vector3::new(1.0, 0.0, 1.0).normalize()).norm() < 1e-15);
    }

    #[test]
    fn backprojection_examples() {
        let k = intr();
        let p = backproject(&k, &SE3Pose::identity(), (k.cx, k.cy), 5.0, 0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 5.0));

        let t0 = Vector3::new(0.3, -1.0, 2.0);
        let pose = SE3Pose {
            rotation: Matrix3::identity(),
            translation: t0,
        };
        let q = backproject(&k, &pose, (10.0, 3.0), 2.0, 0).unwrap();
        assert!((q - (k.camera_direction(10.0, 3.0) * 2.0 + t0)).norm() < 1e-15);

        assert!(matches!(
            backproject(&k, &pose, (1.0, 1.0), 0.0, 4),
            Err(Error::InvalidDepth { frame: 4, .. })
        ));
    }

    #[test]
    fn backproject_reproject_round_trip_and_ray_consistency() {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let (u, v) = (rng.random_range(0.0..47.0), rng.random_range(0.0..35.0));
            let z = rng.random_range(0.5..20.0);
            let x = backproject(&k, &pose, (u, v), z, 0).unwrap();
            let (u2, v2, z2) = project(&k, &pose, &x);
            assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9 && (z - z2).abs() < 1e-9);

            let ray = generate_ray(&k, &pose, (u, v), 0, 0.5).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            let dz = (pose.rotation.transpose() * ray.direction).z;
            let on_ray = ray.origin + ray.direction * (z / dz);
            assert!((on_ray - x).norm() < 1e-9);
        }
    }

    #[test]
    fn gram_schmidt_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut row: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let r = pose_to_se3(&row, 0).unwrap().rotation;
            let s = rng.random_range(0.01..100.0);
            row[..6].iter_mut().for_each(|x| *x *= s);
            let r2 = pose_to_se3(&row, 0).unwrap().rotation;
            assert!((r - r2).abs().max() < 1e-9);
        }
    }

    #[test]
    fn tape_pose_matches_direct_completion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let layer = tape.param(Tensor::matrix(3, 9, rows.clone()).unwrap());
        let pv = poses_on_tape(&mut tape, layer, &[2, 0, 2]).unwrap();
        for (i, &f) in [2usize, 0, 2].iter().enumerate() {
            let expect = pose_to_se3(&rows[f * 9..(f + 1) * 9], f).unwrap();
            for r in 0..3 {
                let got = &tape.value(pv.rows[r]).data()[i * 3..i * 3 + 3];
                for c in 0..3 {
                    assert!((got[c] - expect.rotation[(r, c)]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn pose_error_identical_and_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<SE3Pose> = (0..6).map(|_| random_pose(&mut rng)).collect();
        let e = pose_error(&poses, &poses).unwrap();
        assert!(e.rotation_deg.abs() < 1e-6 && e.translation < 1e-9);

        let g = axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.7);
        let shift = Vector3::new(3.0, -1.0, 0.5);
        let moved: Vec<SE3Pose> = poses
            .iter()
            .map(|p| SE3Pose {
                rotation: g * p.rotation,
                translation: 2.0 * g * p.translation + shift,
            })
            .collect();
        let e = pose_error(&poses, &moved).unwrap();
        assert!(e.rotation_deg < 1e-6 && e.translation < 1e-9, "{e:?}");
    }

    #[test]
    fn single_rotated_pose_error_is_averaged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5;
        let poses: Vec<SE3Pose> = (0..m).map(|_| random_pose(&mut rng)).collect();
        let mut est = poses.clone();
        let axis = Vector3::new(rng.random(), rng.random(), rng.random());
        est[3].rotation = axis_angle(axis, 10f64.to_radians()) * est[3].rotation;
        let e = pose_error(&est, &poses).unwrap();
        assert!((e.rotation_deg - 10.0 / m as f64).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn collinear_centres_fail_alignment() {
        let poses: Vec<SE3Pose> = (0..4)
            .map(|i| SE3Pose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(i as f64, 0.0, 0.0),
            })
            .collect();
        assert!(matches!(
            pose_error(&poses, &poses),
            Err(Error::AlignmentFailed(_))
        ));
    }
}
