#![allow(dead_code)]

use hashlab_core::data::LabeledImageSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noisy images where class `c` lights up its own horizontal band, so a
/// small network separates the classes within an epoch or two.
pub fn banded_images(n: usize, channels: usize, side: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = side / 10;
    let mut pixels = Vec::with_capacity(n * channels * side * side);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for &l in &labels {
        for _ in 0..channels {
            for y in 0..side {
                let lit = band > 0 && y / band == l as usize;
                for _ in 0..side {
                    let base: u8 = if lit { 200 } else { 20 };
                    pixels.push(base.saturating_add(rng.random_range(0..50)));
                }
            }
        }
    }
    LabeledImageSet {
        channels,
        height: side,
        width: side,
        pixels,
        labels,
        ids: (0..n as u32).collect(),
    }
}

/// AP of a relevance list, recomputed from prefix hit counts.
pub fn naive_ap(rel: &[bool]) -> f64 {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (k, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total as f64
}

pub fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}
