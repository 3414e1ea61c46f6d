use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use terradiff_autograd::{randn, Tape};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // f32 conv2d fwd+bwd at VAE-like sizes
    for (n, cin, cout, h) in [(16usize, 16usize, 32usize, 64usize), (16, 32, 64, 32), (16, 64, 64, 16), (16, 64, 64, 8)] {
        let x: ArrayD<f32> = randn(&[n, cin, h, h], &mut rng);
        let w: ArrayD<f32> = randn(&[cout, cin, 3, 3], &mut rng);
        let b: ArrayD<f32> = ArrayD::zeros(IxDyn(&[cout]));
        let iters = 10;
        let t0 = Instant::now();
        for _ in 0..iters {
            let tape = Tape::<f32>::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let y = tape.conv2d(xv, wv, bv, 1, 1);
            let loss = tape.mean_all(y);
            let _ = tape.backward(loss);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let macs = (n * cout * cin * 9 * h * h) as f64;
        let flops = macs * 2.0 * 3.0; // fwd + dw + dx
        println!("conv {}x{}->{} @{}: {:.1} ms/iter, ~{:.1} GFLOPS", n, cin, cout, h, dt * 1e3, flops / dt / 1e9);
    }
    // matmul raw
    let a: ArrayD<f32> = randn(&[512, 512], &mut rng);
    let bm: ArrayD<f32> = randn(&[512, 512], &mut rng);
    let t0 = Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let _ = terradiff_autograd::matmul2(&a, &bm);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("matmul 512: {:.2} ms, {:.1} GFLOPS", dt * 1e3, 2.0 * 512f64.powi(3) / dt / 1e9);
}
