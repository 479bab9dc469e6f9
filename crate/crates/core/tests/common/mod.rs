#![allow(dead_code)]

pub mod gradcheck;

use based::data::{SyntheticScene, SyntheticSceneSpec};
use based::fields::{FieldConfig, MlpConfig};
use based::geometry::PoseParams;
use based::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RIGID: &str = include_str!("../../presets/rigid.toml");
pub const DEFORMABLE: &str = include_str!("../../presets/deformable.toml");
pub const DESK: &str = include_str!("../../presets/desk.toml");

/// A preset scene shrunk to `frames` frames at 16×12.
pub fn tiny_spec(preset: &str, frames: usize) -> SyntheticSceneSpec {
    let mut spec = SyntheticSceneSpec::from_toml(preset).unwrap();
    spec.frame_count = frames;
    spec.width = 16;
    spec.height = 12;
    spec.focal = 14.0;
    spec.correspondences.per_pair = 6;
    spec
}

pub fn tiny_scene(preset: &str, frames: usize, seed: u64) -> SyntheticScene {
    SyntheticScene::build(&tiny_spec(preset, frames), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Small networks and few rays: a step takes milliseconds.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.fields = FieldConfig {
        deform: MlpConfig { depth: 2, width: 8, skip_at: None },
        canonical: MlpConfig { depth: 2, width: 8, skip_at: Some(1) },
        ..FieldConfig::desk()
    };
    cfg.fields.encoding.l_xyz = 3;
    cfg.fields.encoding.l_dir = 2;
    cfg.render.samples = 8;
    cfg.render.guided_samples = 4;
    cfg.render.eval_samples = 8;
    cfg.schedule.pose_joint_iters = 3;
    cfg.schedule.total_iters = 6;
    cfg.schedule.rays_per_image = 4;
    cfg.schedule.stage2_rays = 16;
    cfg.schedule.corr_batch = 16;
    cfg.schedule.checkpoint_every = 2;
    cfg.eval.refine_iters = 2;
    cfg.eval.refine_rays = 8;
    cfg.log.wall_time = false;
    cfg
}

pub fn oracle_poses(scene: &SyntheticScene) -> PoseParams {
    let gt = scene.dataset.gt_poses().unwrap();
    let mut p = PoseParams::identity(gt.len());
    for (i, g) in gt.iter().enumerate() {
        p.set_row(i, &g.to_row());
    }
    p
}
