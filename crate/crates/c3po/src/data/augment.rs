//! Paired augmentation: geometric transforms hit `t0`, `t1` and the mask
//! together; colour jitter touches each image independently and never the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ChangeSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    /// Rotation by a random multiple of 90°.
    Rot90s,
    /// Horizontal flip with probability ½.
    Hflip,
    /// Per-image brightness/contrast/colour jitter.
    ColorJitter,
}

/// Amplitude used by [`AugmentOp::ColorJitter`].
pub const JITTER_AMPLITUDE: f32 = 0.1;

fn remap<T: Copy>(src: &[T], planes: usize, h: usize, w: usize, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for p in 0..planes {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = f(y, x);
                out.push(src[p * h * w + sy * w + sx]);
            }
        }
    }
    out
}

/// Rotates the sample by `k · 90°` counter-clockwise.
pub fn rot90(sample: &ChangeSample, k: usize) -> ChangeSample {
    let mut s = sample.clone();
    for _ in 0..k % 4 {
        let (h, w) = (s.height, s.width);
        // Output (y, x) on a w × h grid reads source (x, w − 1 − y).
        let f = |y: usize, x: usize| (x, w - 1 - y);
        s.t0 = remap(&s.t0, 3, h, w, w, h, f);
        s.t1 = remap(&s.t1, 3, h, w, w, h, f);
        s.mask = remap(&s.mask, 1, h, w, w, h, f);
        s.height = w;
        s.width = h;
    }
    s
}

pub fn hflip(sample: &ChangeSample) -> ChangeSample {
    let (h, w) = (sample.height, sample.width);
    let f = |y: usize, x: usize| (y, w - 1 - x);
    ChangeSample {
        t0: remap(&sample.t0, 3, h, w, h, w, f),
        t1: remap(&sample.t1, 3, h, w, h, w, f),
        mask: remap(&sample.mask, 1, h, w, h, w, f),
        ..sample.clone()
    }
}

fn jitter(image: &mut [f32], rng: &mut impl Rng) {
    let a = JITTER_AMPLITUDE;
    let gain = 1.0 + rng.random_range(-a..a);
    let bias = rng.random_range(-a..a);
    let plane = image.len() / 3;
    for k in 0..3 {
        let cg = 1.0 + rng.random_range(-a / 2.0..a / 2.0);
        for v in &mut image[k * plane..(k + 1) * plane] {
            *v = (*v * gain * cg + bias).clamp(0.0, 1.0);
        }
    }
}

/// Applies `ops` in the listed order with randomness drawn from `seed`.
pub fn augment(sample: &ChangeSample, ops: &[AugmentOp], seed: u64) -> ChangeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample.clone();
    for op in ops {
        match op {
            AugmentOp::Rot90s => s = rot90(&s, rng.random_range(0..4)),
            AugmentOp::Hflip => {
                if rng.random_bool(0.5) {
                    s = hflip(&s);
                }
            }
            AugmentOp::ColorJitter => {
                jitter(&mut s.t0, &mut rng);
                jitter(&mut s.t1, &mut rng);
            }
        }
    }
    s
}
