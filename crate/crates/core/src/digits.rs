//! Seeded synthetic digit images.
//!
//! Each digit is drawn as seven-segment strokes with per-sample jitter in
//! placement, size, slant, rotation, stroke width and intensity, so that a
//! small CNN has something non-trivial to learn without external data.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::LabeledDataset;
use crate::rng::{normal, Rng, SeedStream};
use crate::tensor::Tensor;

// Segment endpoints in glyph coordinates: x in [0, 1] left to right,
// y in [0, 1] top to bottom.
const TOP: [(f64, f64); 2] = [(0.0, 0.0), (1.0, 0.0)];
const UPPER_RIGHT: [(f64, f64); 2] = [(1.0, 0.0), (1.0, 0.5)];
const LOWER_RIGHT: [(f64, f64); 2] = [(1.0, 0.5), (1.0, 1.0)];
const BOTTOM: [(f64, f64); 2] = [(0.0, 1.0), (1.0, 1.0)];
const LOWER_LEFT: [(f64, f64); 2] = [(0.0, 0.5), (0.0, 1.0)];
const UPPER_LEFT: [(f64, f64); 2] = [(0.0, 0.0), (0.0, 0.5)];
const MIDDLE: [(f64, f64); 2] = [(0.0, 0.5), (1.0, 0.5)];

fn segments(digit: usize) -> &'static [[(f64, f64); 2]] {
    match digit {
        0 => &[TOP, UPPER_RIGHT, LOWER_RIGHT, BOTTOM, LOWER_LEFT, UPPER_LEFT],
        1 => &[UPPER_RIGHT, LOWER_RIGHT],
        2 => &[TOP, UPPER_RIGHT, MIDDLE, LOWER_LEFT, BOTTOM],
        3 => &[TOP, UPPER_RIGHT, MIDDLE, LOWER_RIGHT, BOTTOM],
        4 => &[UPPER_LEFT, MIDDLE, UPPER_RIGHT, LOWER_RIGHT],
        5 => &[TOP, UPPER_LEFT, MIDDLE, LOWER_RIGHT, BOTTOM],
        6 => &[TOP, UPPER_LEFT, MIDDLE, LOWER_LEFT, LOWER_RIGHT, BOTTOM],
        7 => &[TOP, UPPER_RIGHT, LOWER_RIGHT],
        8 => &[TOP, UPPER_RIGHT, LOWER_RIGHT, BOTTOM, LOWER_LEFT, UPPER_LEFT, MIDDLE],
        _ => &[TOP, UPPER_RIGHT, LOWER_RIGHT, BOTTOM, UPPER_LEFT, MIDDLE],
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p.0 - (a.0 + t * vx), p.1 - (a.1 + t * vy));
    libm::sqrt(dx * dx + dy * dy)
}

fn render(digit: usize, size: usize, rng: &mut Rng) -> Vec<f64> {
    let s = size as f64;
    let width = s * rng.gen_range(0.30..0.42);
    let height = s * rng.gen_range(0.55..0.70);
    let cx = s / 2.0 + s * rng.gen_range(-0.07..0.07);
    let cy = s / 2.0 + s * rng.gen_range(-0.07..0.07);
    let slant = rng.gen_range(-0.25..0.25);
    let angle = rng.gen_range(-10.0f64..10.0).to_radians();
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    let thickness = s / 16.0 * rng.gen_range(0.9..1.6);
    let intensity = rng.gen_range(0.75..1.0);

    let mut place = |(gx, gy): (f64, f64)| {
        let gx = gx + rng.gen_range(-0.06..0.06);
        let gy = gy + rng.gen_range(-0.04..0.04);
        let x = (gx - 0.5) * width + slant * (0.5 - gy) * height;
        let y = (gy - 0.5) * height;
        (cx + cos * x - sin * y, cy + sin * x + cos * y)
    };
    let strokes: Vec<((f64, f64), (f64, f64))> = segments(digit).iter().map(|seg| (place(seg[0]), place(seg[1]))).collect();

    let mut img = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let d = strokes.iter().map(|&(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
            let coverage = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let noise = 0.03 * normal(rng);
            img.push((intensity * coverage + noise).clamp(0.0, 1.0));
        }
    }
    img
}

/// `n` single-channel `size x size` digit images with balanced, shuffled labels.
pub fn synthetic_digits(n: usize, size: usize, seed: u64) -> LabeledDataset {
    let streams = SeedStream::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    labels.shuffle(&mut streams.child("labels").rng());
    let mut rng = streams.child("render").rng();
    let mut data = Vec::with_capacity(n * size * size);
    for &label in &labels {
        data.extend(render(label, size, &mut rng));
    }
    let images = Tensor::new(&[n, 1, size, size], data).expect("sized by construction");
    let names: Vec<String> = (0..10).map(|d| format!("{d}")).collect();
    LabeledDataset::new(images, labels, names).expect("labels in range by construction")
}
