//! The four correspondence/depth loss combinations on the deformable scene,
//! at a reduced iteration budget.
//!
//! `cargo run --release --example ablation -- [total_iters]`

use based::data::{SyntheticScene, SyntheticSceneSpec};
use based::eval::{ablation_table, run_ablation};
use based::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> based::Result<()> {
    let iters = std::env::args().nth(1).unwrap_or_else(|| "400".into());
    let spec = SyntheticSceneSpec::from_toml(include_str!("../presets/deformable.toml"))?;
    let scene = SyntheticScene::build(&spec, &mut ChaCha8Rng::seed_from_u64(1))?;
    let cfg = TrainConfig::from_toml(
        include_str!("../presets/desk.toml"),
        &[format!("schedule.total_iters={iters}")],
    )?;
    let rows = run_ablation(&scene.dataset, &cfg, 0, None)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
