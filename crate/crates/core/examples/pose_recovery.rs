//! Joint pose and field optimisation on the rigid scene, starting from
//! identity poses. Prints the aligned pose error during stage 1.
//!
//! `cargo run --release --example pose_recovery -- [iterations]`

use based::data::{SyntheticScene, SyntheticSceneSpec};
use based::geometry::{pose_error, SE3Pose};
use based::training::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> based::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let spec = SyntheticSceneSpec::from_toml(include_str!("../presets/rigid.toml"))?;
    let scene = SyntheticScene::build(&spec, &mut ChaCha8Rng::seed_from_u64(1))?;
    let ds = &scene.dataset;
    let cfg = TrainConfig::from_toml(include_str!("../presets/desk.toml"), &[])?;
    let gt = ds.gt_poses().expect("synthetic poses");
    let reference: Vec<SE3Pose> = ds.split.train.iter().map(|&i| gt[i]).collect();
    let mut trainer = Trainer::new(ds, cfg, 0)?;
    while trainer.state.iteration < iters.min(trainer.config().schedule.pose_joint_iters) {
        let row = trainer.step()?;
        if row.iteration % 20 == 0 {
            let poses = trainer.state.pose_params();
            let est = ds.split.train.iter().map(|&i| poses.pose(i)).collect::<based::Result<Vec<_>>>()?;
            let e = pose_error(&est, &reference)?;
            println!(
                "iteration {:4}  L_pho {:.4}  L_corr {:.2e}  rotation {:7.3}°  centre {:.4}",
                row.iteration, row.l_pho, row.l_corr, e.rotation_deg, e.translation
            );
        }
    }
    Ok(())
}
