use ganrl::tensor::{conv2d, matmul, Tensor};
use std::time::Instant;

fn main() {
    // matmul throughput
    let a = Tensor::<f32>::full(&[256, 400], 0.5);
    let b = Tensor::<f32>::full(&[400, 256], 0.25);
    let t0 = Instant::now();
    let mut n = 0u64;
    while t0.elapsed().as_secs_f64() < 1.0 {
        std::hint::black_box(matmul(&a, &b));
        n += 1;
    }
    let gmacs = (n as f64 * 256.0 * 400.0 * 256.0) / t0.elapsed().as_secs_f64() / 1e9;
    println!("matmul 256x400x256: {gmacs:.2} G-MAC/s");

    // conv throughput at WGAN-critic-like size
    let x = Tensor::<f32>::full(&[64, 16, 16, 16], 0.5);
    let w = Tensor::<f32>::full(&[16, 16, 5, 5], 0.1);
    let t0 = Instant::now();
    let mut n = 0u64;
    while t0.elapsed().as_secs_f64() < 1.0 {
        std::hint::black_box(conv2d(&x, &w, 2, 2));
        n += 1;
    }
    // out 8x8: macs = 64*16*8*8*16*25
    let gmacs = (n as f64 * 64.0 * 16.0 * 64.0 * 16.0 * 25.0) / t0.elapsed().as_secs_f64() / 1e9;
    println!("conv2d 64x16x16x16 k5s2: {gmacs:.2} G-MAC/s");

    // small-batch conv (policy acting path)
    let x = Tensor::<f32>::full(&[8, 1, 32, 32], 0.5);
    let w = Tensor::<f32>::full(&[16, 1, 4, 4], 0.1);
    let t0 = Instant::now();
    let mut n = 0u64;
    while t0.elapsed().as_secs_f64() < 1.0 {
        std::hint::black_box(conv2d(&x, &w, 2, 1));
        n += 1;
    }
    let gmacs = (n as f64 * 8.0 * 16.0 * 15.0 * 15.0 * 16.0) / t0.elapsed().as_secs_f64() / 1e9;
    println!("conv2d 8x1x32x32 k4s2: {gmacs:.2} G-MAC/s ({n} iters)");
}
