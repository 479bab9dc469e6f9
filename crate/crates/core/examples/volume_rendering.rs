//! Volume renders rays through an opaque slab and compares the expected
//! depth with the analytic entry point as the sample count grows.

use based::rendering::{volume_render, RaySamples};

fn main() -> based::Result<()> {
    let (near, far, surface) = (2.0, 8.0, 4.83);
    for m in [8, 16, 32, 64, 128] {
        let s = RaySamples::midpoints(near, far, m);
        let sigma: Vec<f64> = s.t_vals.iter().map(|&t| if t >= surface { 1e4 } else { 0.0 }).collect();
        let colors: Vec<[f64; 3]> = s.t_vals.iter().map(|&t| [t / far, 0.5, 1.0 - t / far]).collect();
        let out = volume_render(&s, &colors, &sigma)?;
        println!(
            "M={m:4}  depth {:.4}  error {:.4}  spacing {:.4}  opacity {:.6}",
            out.depth,
            (out.depth - surface).abs(),
            (far - near) / m as f64,
            out.opacity
        );
    }
    Ok(())
}
