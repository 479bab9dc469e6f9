//! Trains on the deformable scene, writes a checkpoint, renders a novel
//! time and scores the held-out frames.
//!
//! `cargo run --release --example train_render_eval -- [total_iters] [out_dir]`

use std::path::PathBuf;

use based::data::{export_renders, SyntheticScene, SyntheticSceneSpec};
use based::eval::{evaluate, render_view};
use based::training::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> based::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters = args.next().unwrap_or_else(|| "600".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train".into()));
    let spec = SyntheticSceneSpec::from_toml(include_str!("../presets/deformable.toml"))?;
    let scene = SyntheticScene::build(&spec, &mut ChaCha8Rng::seed_from_u64(1))?;
    let ds = &scene.dataset;
    let cfg = TrainConfig::from_toml(
        include_str!("../presets/desk.toml"),
        &[format!("schedule.total_iters={iters}")],
    )?;
    let mut trainer = Trainer::new(ds, cfg.clone(), 0)?;
    trainer.run(Some(&out))?;
    let last = trainer.log.last().expect("at least one iteration");
    println!("trained {} iterations, training PSNR {:.2} dB", last.iteration, last.psnr());

    let pose = trainer.state.pose_params().pose(ds.split.train[0])?;
    let view = render_view(&trainer.state.fields, &ds.intrinsics, ds.near, ds.far, &pose, 0.37, &cfg)?;
    export_renders(&out, "novel_t037", &view.color, Some(&view.depth_map()))?;

    let evaluation = evaluate(ds, &trainer.state, &cfg, 0, &ds.split.test)?;
    evaluation.write(&out.join("eval"))?;
    print!("{}", evaluation.report.to_text());
    println!("outputs in {}", out.display());
    Ok(())
}
