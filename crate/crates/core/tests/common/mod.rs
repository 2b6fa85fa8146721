//! Procedural composites shared by integration tests.
#![allow(dead_code)]

use egoseg::imgproc::ImageF32;
use egoseg::matting::AlphaMatte;
use egoseg::synth::{composite, Sample};
use egoseg::thundernet::ModelConfig;
use egoseg::train::TrainConfig;
use rand::Rng;

/// An arm-like soft-edged ellipse of skin tone over a textured background.
pub fn composite_sample(size: usize, seed: u64) -> Sample {
    let mut rng = egoseg::rng::stream(seed, &[0x7465_7374]);
    let (cy, cx) = (rng.gen_range(0.3..0.7) * size as f64, rng.gen_range(0.3..0.7) * size as f64);
    let (ry, rx) = (rng.gen_range(0.15..0.3) * size as f64, rng.gen_range(0.2..0.35) * size as f64);
    let skin = [rng.gen_range(0.75..0.9), rng.gen_range(0.5..0.65), rng.gen_range(0.35..0.5)];
    let tint: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let phase: f32 = rng.gen_range(0.0..6.0);
    let alpha: Vec<f32> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let r = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
            ((1.0 - r) * 6.0 + 0.5).clamp(0.0, 1.0) as f32
        })
        .collect();
    let fg = ImageF32::from_fn(size, size, 3, |y, x| {
        let shade = 0.9 + 0.1 * ((y + x) as f32 * 0.3).sin();
        skin.iter().map(|&c| c * shade).collect()
    });
    let bg = ImageF32::from_fn(size, size, 3, |y, x| {
        let t = 0.5 + 0.3 * ((x as f32 * 0.4 + phase).sin() * (y as f32 * 0.25).cos());
        tint.iter().map(|&c| (0.2 + 0.6 * c) * t).collect()
    });
    let (image, mask) = composite(&fg, &AlphaMatte::new(size, size, alpha).unwrap(), &bg).unwrap();
    Sample::new(format!("s{seed}"), image, mask).unwrap()
}

pub fn composites(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    (0..n).map(|i| composite_sample(size, seed * 1000 + i as u64)).collect()
}

/// Toy architecture with the scaled-down recipe used for quick training runs.
pub fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs,
        model: ModelConfig::toy(),
        ..TrainConfig::default()
    }
}
