//! Image and depth metrics on a synthetic frame against a degraded copy.

use based::data::{SyntheticScene, SyntheticSceneSpec};
use based::eval::{depth_metrics, median_scale, psnr, ssim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> based::Result<()> {
    let spec = SyntheticSceneSpec::from_toml(include_str!("../presets/deformable.toml"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = SyntheticScene::build(&spec, &mut rng)?;
    let frame = &scene.dataset.frames[0];
    for noise in [0.0, 0.01, 0.05, 0.1] {
        let mut noisy = frame.image.clone();
        for v in &mut noisy.data {
            *v = (*v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
        }
        let p = psnr(&noisy, &frame.image, None)?;
        let s = ssim(&noisy.to_gray(), &frame.image.to_gray())?;
        println!("noise ±{noise:.2}: psnr {p:.2} dB, ssim {s:.4}");
    }
    let depth = frame.ref_depth.as_ref().expect("synthetic frames carry depth");
    let reference: Vec<f64> = depth.data.iter().map(|&z| z as f64).collect();
    let valid: Vec<bool> = reference.iter().map(|&z| z > 0.0).collect();
    let scaled: Vec<f64> = reference.iter().map(|z| 1.3 * z).collect();
    let raw = depth_metrics(&scaled, &reference, &valid, depth.width)?;
    println!("depth ×1.3: abs_rel {:.4}, delta1 {:.3}", raw.abs_rel, raw.delta1);
    let k = median_scale(&scaled, &reference, &valid).expect("positive depths");
    let aligned: Vec<f64> = scaled.iter().map(|z| z * k).collect();
    let m = depth_metrics(&aligned, &reference, &valid, depth.width)?;
    println!("median scaled by {k:.4}: abs_rel {:.2e}, delta1 {:.3}", m.abs_rel, m.delta1);
    Ok(())
}
