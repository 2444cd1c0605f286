use std::time::Instant;

use gradcore::{Padding, Tape, Tensor};
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for &(c, o, hw, k) in &[(3usize, 16usize, 64usize, 7usize), (64, 64, 16, 3), (32, 16, 64, 3)] {
        let x = Tensor::<f32>::randn(&[1, c, hw, hw], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[o, c, k, k], 0.1, &mut rng);
        let t0 = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, Padding::reflect(k / 2)).unwrap();
            let m = tape.mean(y).unwrap();
            tape.backward(m).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let macs = (c * o * hw * hw * k * k) as f64 * 3.0;
        println!("c{c} o{o} {hw}px k{k}: {:.2} ms fwd+bwd, {:.1} GMAC/s", dt * 1e3, macs / dt / 1e9);
    }
}
