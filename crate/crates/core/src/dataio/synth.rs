use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.1;
pub const SHAPES: (usize, usize) = (1, 3);
/// Ellipse semi-axes as a fraction of the side.
pub const RADIUS: (f64, f64) = (0.10, 0.40);

/// Seeded synthetic dataset. `num_classes == 2`: 1–3 bright ellipses on a
/// noisy dark background, mask = union of interiors. `num_classes == 4`:
/// cardiac-like slice with LV disk (3), myocardium ring (2) and an RV
/// crescent (1) hugging the ring.
pub fn synth_generate(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("synthetic size {size} must be a positive multiple of 32")));
    }
    if num_classes != 2 && num_classes != 4 {
        return Err(Error::Config(format!(
            "synthetic generator supports 2 or 4 classes, not {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let (intensity, mask) = if num_classes == 2 {
                ellipses(&mut rng, size)
            } else {
                cardiac(&mut rng, size)
            };
            Sample {
                image: colourise(&mut rng, &intensity, size),
                mask,
                id: format!("synth{i:05}"),
            }
        })
        .collect();
    Ok(Dataset { samples, num_classes })
}

/// Replicates a grey intensity map into three channels with per-channel
/// Gaussian noise, clamped to `[0, 1]`.
fn colourise(rng: &mut ChaCha8Rng, intensity: &[f64], size: usize) -> Tensor<f32> {
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        (intensity[i % plane] + noise.sample(rng)).clamp(0.0, 1.0) as f32
    })
}

fn ellipses(rng: &mut ChaCha8Rng, size: usize) -> (Vec<f64>, Vec<u8>) {
    let s = size as f64;
    let background = rng.gen_range(0.15..0.35);
    let mut intensity = vec![background; size * size];
    let mut mask = vec![0u8; size * size];
    for _ in 0..rng.gen_range(SHAPES.0..=SHAPES.1) {
        let (cx, cy) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s);
        let (ra, rb) = (rng.gen_range(RADIUS.0..RADIUS.1) * s, rng.gen_range(RADIUS.0..RADIUS.1) * s);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let level = rng.gen_range(0.65..0.9);
        let (sin, cos) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * cos + dy * sin) / ra;
                let v = (-dx * sin + dy * cos) / rb;
                if u * u + v * v <= 1.0 {
                    mask[y * size + x] = 1;
                    intensity[y * size + x] = level;
                }
            }
        }
    }
    (intensity, mask)
}

fn cardiac(rng: &mut ChaCha8Rng, size: usize) -> (Vec<f64>, Vec<u8>) {
    let s = size as f64;
    let (cx, cy) = (rng.gen_range(0.4..0.6) * s, rng.gen_range(0.4..0.6) * s);
    let lv = rng.gen_range(0.08..0.13) * s;
    let myo = lv + rng.gen_range(0.05..0.08) * s;
    let rv = rng.gen_range(0.12..0.18) * s;
    let angle: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let (rx, ry) = (cx + angle.cos() * myo, cy + angle.sin() * myo);
    let levels = [
        rng.gen_range(0.1..0.25),
        rng.gen_range(0.6..0.7),
        rng.gen_range(0.35..0.45),
        rng.gen_range(0.85..0.95),
    ];
    let mut intensity = vec![0.0; size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = (px - cx).hypot(py - cy);
            let class = if d <= lv {
                3
            } else if d <= myo {
                2
            } else if (px - rx).hypot(py - ry) <= rv {
                1
            } else {
                0
            };
            mask[y * size + x] = class;
            intensity[y * size + x] = levels[class as usize];
        }
    }
    (intensity, mask)
}
