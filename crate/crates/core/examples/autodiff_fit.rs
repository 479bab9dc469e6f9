//! Fits y = sin(3x) with a two-layer MLP using the tape and Adam.

use based::autodiff::{adam_step, AdamConfig, ParamGroup, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> based::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hidden = 32;
    let init = |rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-s..s)).collect())
    };
    let mut group = ParamGroup::new(
        "mlp",
        vec![
            init(&mut rng, 1, hidden, 1.0)?,
            init(&mut rng, 1, hidden, 1.0)?,
            init(&mut rng, hidden, 1, 0.3)?,
            Tensor::zeros(vec![1, 1]),
        ],
    );
    let n = 64;
    let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
    for it in 1..=2000u64 {
        let mut tape = Tape::new();
        let p = group.register(&mut tape);
        let x = tape.constant(Tensor::new(vec![n, 1], xs.clone())?);
        let y = tape.constant(Tensor::new(vec![n, 1], ys.clone())?);
        let h = tape.matmul(x, p.0[0])?;
        let h = tape.add_broadcast(h, p.0[1])?;
        let h = tape.sigmoid(h);
        let out = tape.matmul(h, p.0[2])?;
        let out = tape.add_broadcast(out, p.0[3])?;
        let err = tape.sub(out, y)?;
        let sq = tape.square(err);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        let g = p.collect(&tape, &grads);
        adam_step(&mut group, &g, 1e-2, &AdamConfig::default(), it)?;
        if it % 400 == 0 {
            println!("iteration {it:4}  mse {:.3e}", tape.value(loss).item());
        }
    }
    Ok(())
}
