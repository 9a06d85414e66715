use ganrl::envs::Observation;
use ganrl::girm::{Girm, GirmConfig, StateMemory};
use ganrl::nets::Norm;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn ascii(frame: &[f32], canvas: usize) -> String {
    let mut out = String::new();
    for y in (0..canvas).step_by(2) {
        for x in (0..canvas).step_by(1) {
            let v = frame[y * canvas + x];
            out.push(if v > 0.5 { '#' } else if v > 0.0 { '+' } else if v > -0.5 { '.' } else { ' ' });
        }
        out.push('\n');
    }
    out
}

fn dot_frame(canvas: usize, cx: usize, cy: usize, size: usize) -> Observation {
    let mut pixels = vec![-1.0f32; canvas * canvas];
    for y in cy.saturating_sub(size / 2)..(cy + size / 2).min(canvas) {
        for x in cx.saturating_sub(size / 2)..(cx + size / 2).min(canvas) {
            pixels[y * canvas + x] = 1.0;
        }
    }
    Observation { canvas, pixels }
}

fn corner_frame(rng: &mut ChaCha8Rng, canvas: usize) -> Observation {
    let corner = rng.gen_range(0..4u32);
    let (bx, by) = match corner {
        0 => (5, 5),
        1 => (canvas - 6, 5),
        2 => (5, canvas - 6),
        _ => (canvas - 6, canvas - 6),
    };
    let jit: i32 = std::env::var("JIT").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
    let jx = rng.gen_range(-jit..=jit);
    let jy = rng.gen_range(-jit..=jit);
    dot_frame(canvas, (bx as i32 + jx) as usize, (by as i32 + jy) as usize, std::env::var("DOT").ok().and_then(|v| v.parse().ok()).unwrap_or(6))
}

fn center_frame(rng: &mut ChaCha8Rng, canvas: usize) -> Observation {
    let jx = rng.gen_range(-2i32..=2);
    let jy = rng.gen_range(-2i32..=2);
    dot_frame(canvas, (canvas as i32 / 2 + jx) as usize, (canvas as i32 / 2 + jy) as usize, std::env::var("DOT").ok().and_then(|v| v.parse().ok()).unwrap_or(6))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let corpus: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4096);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3);
    let enc_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let width: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(12);
    let mut pass = 0;
    let seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);
    for seed in 0..seeds {
        let t0 = Instant::now();
        let canvas = 32;
        let n_critic: usize = std::env::var("NCRITIC").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
        let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
        let cfg = GirmConfig {
            canvas,
            z_dim: std::env::var("ZDIM").ok().and_then(|v| v.parse().ok()).unwrap_or(64),
            width,
            batch_size: 32,
            memory_capacity: corpus,
            first_gan_epochs: epochs,
            first_encoder_epochs: enc_epochs,
            n_critic,
            learning_rate: lr,
            lambda_feat: std::env::var("LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
            gen_norm: Norm::Layer,
            enc_norm: Norm::Layer,
            critic_norm: Norm::Layer,
            ..GirmConfig::default()
        };
        let mut girm = Girm::new(cfg, seed).unwrap();
        let mut mem = StateMemory::new(corpus, canvas);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEAD);
        while !mem.is_full() {
            mem.store(corner_frame(&mut rng, canvas)).unwrap();
        }
        let report = girm.maybe_train(&mut mem).unwrap().unwrap();
        let held_p: f64 = (0..64)
            .map(|_| girm.raw_intrinsic(&corner_frame(&mut rng, canvas)).unwrap())
            .sum::<f64>() / 64.0;
        let q: f64 = (0..64)
            .map(|_| girm.raw_intrinsic(&center_frame(&mut rng, canvas)).unwrap())
            .sum::<f64>() / 64.0;
        let ratio = q / held_p;
        let ok = ratio >= 2.0;
        pass += ok as u32;
        println!(
            "seed {seed}: held-out corner {held_p:.5}  center {q:.5}  ratio {ratio:.2}  {}  ({:.1}s, critic loss {:.3} -> {:.3}, enc {:.4} -> {:.4})",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            report.gan.critic.first().unwrap(),
            report.gan.critic.last().unwrap(),
            report.encoder.first().unwrap(),
            report.encoder.last().unwrap(),
        );
    }
    println!("{pass}/{seeds} seeds pass");
    if std::env::var("DUMP").is_ok() {
        let canvas = 32;
        let cfg = GirmConfig {
            canvas, z_dim: std::env::var("ZDIM").ok().and_then(|v| v.parse().ok()).unwrap_or(64), width, batch_size: 32, memory_capacity: corpus,
            first_gan_epochs: epochs, first_encoder_epochs: enc_epochs,
            n_critic: std::env::var("NCRITIC").ok().and_then(|v| v.parse().ok()).unwrap_or(1),
            learning_rate: std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4),
            gen_norm: Norm::Layer, enc_norm: Norm::Layer, critic_norm: Norm::Layer,
            ..GirmConfig::default()
        };
        let mut girm = Girm::new(cfg, 0).unwrap();
        let mut mem = StateMemory::new(corpus, canvas);
        let mut rng = ChaCha8Rng::seed_from_u64(0xDEAD);
        while !mem.is_full() { mem.store(corner_frame(&mut rng, canvas)).unwrap(); }
        girm.maybe_train(&mut mem).unwrap().unwrap();
        let target = corner_frame(&mut rng, canvas);
        println!("target:\n{}", ascii(&target.pixels, canvas));
        let rec = girm.debug_reconstruct(&target).unwrap();
        println!("reconstruction:\n{}", ascii(&rec, canvas));
        for zseed in [7, 8] {
            let sample = girm.debug_sample(zseed).unwrap();
            println!("G(z) sample {zseed}:\n{}", ascii(&sample, canvas));
        }
    }
}
