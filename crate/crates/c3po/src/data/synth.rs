//! Procedural paired scenes with controllable change types.
//!
//! Each sample draws a smooth textured background shared by both images,
//! places distractor objects in both, then adds changed objects:
//! appear (only in `t1`), disappear (only in `t0`) or exchange (different
//! objects at the same spot). Masks are rasterised from the same geometry as
//! the pixels, so with zero annotation noise they cover the changed objects
//! exactly. Each image then gets independent photometric jitter and pixel
//! noise, and `t1` may be offset by a small registration shift.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChangeSample, ChangeType, LabelMode};
use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One step of the splitmix64 generator: mixes `x + golden` into a
/// well-distributed 64-bit value.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a stream seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
    Triangle,
}

/// Sampling probabilities of the change types; zero disables a type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChangeProbs {
    pub appear: f64,
    pub disappear: f64,
    pub exchange: f64,
}

impl Default for ChangeProbs {
    fn default() -> Self {
        ChangeProbs {
            appear: 1.0 / 3.0,
            disappear: 1.0 / 3.0,
            exchange: 1.0 / 3.0,
        }
    }
}

impl ChangeProbs {
    pub fn only(kind: ChangeType) -> Self {
        let mut p = ChangeProbs {
            appear: 0.0,
            disappear: 0.0,
            exchange: 0.0,
        };
        *p.get_mut(kind) = 1.0;
        p
    }

    pub fn get(&self, kind: ChangeType) -> f64 {
        match kind {
            ChangeType::Appear => self.appear,
            ChangeType::Disappear => self.disappear,
            ChangeType::Exchange => self.exchange,
        }
    }

    fn get_mut(&mut self, kind: ChangeType) -> &mut f64 {
        match kind {
            ChangeType::Appear => &mut self.appear,
            ChangeType::Disappear => &mut self.disappear,
            ChangeType::Exchange => &mut self.exchange,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> ChangeType {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for kind in ChangeType::ALL {
            acc += self.get(kind);
            if u < acc {
                return kind;
            }
        }
        // Rounding left a sliver above the last positive probability.
        *ChangeType::ALL
            .iter()
            .rev()
            .find(|&&k| self.get(k) > 0.0)
            .expect("validated: some probability is positive")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Side length in pixels; a multiple of 32, at least 64.
    pub image_size: usize,
    /// Inclusive range of unchanged objects drawn in both images.
    pub distractors: [usize; 2],
    /// Inclusive range of changed objects per sample.
    pub changes: [usize; 2],
    /// Inclusive range of object diameters in pixels.
    pub object_size: [usize; 2],
    pub shapes: Vec<ShapeKind>,
    pub change_probs: ChangeProbs,
    /// Mixed into every sample's background texture.
    pub background_seed: u64,
    /// Amplitude of per-image brightness/contrast/colour jitter.
    pub jitter: f64,
    /// Amplitude of uniform per-pixel noise.
    pub pixel_noise: f64,
    /// Maximum registration offset of `t1` in pixels (each axis).
    pub max_shift: usize,
    /// Probability that a changed object is left out of the mask.
    pub annotation_noise: f64,
    pub label_mode: LabelMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            distractors: [1, 3],
            changes: [1, 2],
            object_size: [8, 20],
            shapes: vec![ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Triangle],
            change_probs: ChangeProbs::default(),
            background_seed: 0,
            jitter: 0.06,
            pixel_noise: 0.03,
            max_shift: 1,
            annotation_noise: 0.0,
            label_mode: LabelMode::Binary,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 64 || self.image_size % 32 != 0 {
            return bad(format!("image_size must be a multiple of 32 and at least 64, got {}", self.image_size));
        }
        for (name, [lo, hi]) in [("distractors", self.distractors), ("changes", self.changes), ("object_size", self.object_size)] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is inverted"));
            }
        }
        if self.object_size[0] < 3 || self.object_size[1] * 2 > self.image_size {
            return bad(format!(
                "object_size must lie in [3, {}], got {:?}",
                self.image_size / 2,
                self.object_size
            ));
        }
        if self.shapes.is_empty() {
            return bad("shapes must not be empty".into());
        }
        let p = self.change_probs;
        if [p.appear, p.disappear, p.exchange].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("change probabilities must lie in [0, 1]".into());
        }
        let total = p.appear + p.disappear + p.exchange;
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("change probabilities must sum to 1, got {total}"));
        }
        if !(0.0..=1.0).contains(&self.annotation_noise) || self.jitter < 0.0 || self.pixel_noise < 0.0 {
            return bad("annotation_noise must lie in [0, 1]; jitter and pixel_noise must be non-negative".into());
        }
        Ok(())
    }

    /// Types that can occur.
    pub fn allowed_types(&self) -> BTreeSet<ChangeType> {
        ChangeType::ALL
            .into_iter()
            .filter(|&k| self.change_probs.get(k) > 0.0)
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Half extent of the bounding box.
    r: f64,
    /// Height-to-width ratio for rectangles.
    aspect: f64,
    color: [f64; 3],
}

impl Object {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Rect => dx.abs() <= self.r && dy.abs() <= self.r * self.aspect,
            ShapeKind::Disc => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Triangle => {
                // Apex up at (0, −r), base from (−r, r) to (r, r).
                dy <= self.r && dy >= -self.r && dx.abs() <= (dy + self.r) / 2.0
            }
        }
    }
}

struct Texture {
    waves: [(f64, f64, f64, [f64; 3]); 3],
    base: [f64; 3],
}

impl Texture {
    fn new(rng: &mut impl Rng) -> Self {
        let mut wave = || {
            let f = 2.0 * std::f64::consts::PI / rng.random_range(12.0..48.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [0.0; 3].map(|_: f64| rng.random_range(0.02..0.07));
            (f * angle.cos(), f * angle.sin(), phase, amp)
        };
        let waves = [wave(), wave(), wave()];
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.25..0.75));
        Texture { waves, base }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for &(fx, fy, phase, amp) in &self.waves {
            let s = (fx * x + fy * y + phase).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c
    }
}

struct Scene {
    texture: Texture,
    t0_objects: Vec<Object>,
    t1_objects: Vec<Object>,
    /// Changed objects' footprints (one or two objects each) with labels.
    changes: Vec<(Vec<Object>, ChangeType, bool)>,
    shift: (f64, f64),
}

fn color_far_from(rng: &mut impl Rng, others: &[[f64; 3]]) -> [f64; 3] {
    for _ in 0..64 {
        let c = [0.0; 3].map(|_: f64| rng.random_range(0.0..1.0));
        let far = others
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= 0.35);
        if far {
            return c;
        }
    }
    // Fall back to the colour opposite the first reference.
    others.first().map_or([0.5; 3], |o| o.map(|v| if v > 0.5 { 0.05 } else { 0.95 }))
}

/// Attempts one scene layout; `None` when placement exceeded its retry budget.
fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng, tex_seed: u64) -> Option<Scene> {
    let texture = Texture::new(&mut ChaCha8Rng::seed_from_u64(tex_seed));
    let size = cfg.image_size as f64;
    let n_distractors = rng.random_range(cfg.distractors[0]..=cfg.distractors[1]);
    let n_changes = rng.random_range(cfg.changes[0]..=cfg.changes[1]);
    let mut boxes: Vec<(f64, f64, f64)> = Vec::new();
    let mut place = |rng: &mut ChaCha8Rng, r: f64| -> Option<(f64, f64)> {
        for _ in 0..100 {
            let cx = rng.random_range(r + 1.0..size - r - 1.0);
            let cy = rng.random_range(r + 1.0..size - r - 1.0);
            let free = boxes
                .iter()
                .all(|&(bx, by, br)| (cx - bx).abs() > r + br + 2.0 || (cy - by).abs() > r + br + 2.0);
            if free {
                boxes.push((cx, cy, r));
                return Some((cx, cy));
            }
        }
        None
    };
    let new_object = |rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64, avoid: &[[f64; 3]], not: Option<ShapeKind>| {
        let kinds: Vec<ShapeKind> = cfg.shapes.iter().copied().filter(|&k| Some(k) != not).collect();
        let kinds = if kinds.is_empty() { cfg.shapes.clone() } else { kinds };
        Object {
            kind: kinds[rng.random_range(0..kinds.len())],
            cx,
            cy,
            r,
            aspect: rng.random_range(0.6..1.0),
            color: color_far_from(rng, avoid),
        }
    };
    let radius = |rng: &mut ChaCha8Rng| rng.random_range(cfg.object_size[0]..=cfg.object_size[1]) as f64 / 2.0;

    let mut t0_objects = Vec::new();
    let mut t1_objects = Vec::new();
    let mut changes = Vec::new();
    for _ in 0..n_distractors {
        let r = radius(rng);
        let (cx, cy) = place(rng, r)?;
        let o = new_object(rng, cx, cy, r, &[texture.base], None);
        t0_objects.push(o);
        t1_objects.push(o);
    }
    for _ in 0..n_changes {
        let kind = cfg.change_probs.sample(rng);
        let annotated = !rng.random_bool(cfg.annotation_noise);
        match kind {
            ChangeType::Appear | ChangeType::Disappear => {
                let r = radius(rng);
                let (cx, cy) = place(rng, r)?;
                let o = new_object(rng, cx, cy, r, &[texture.base], None);
                if kind == ChangeType::Appear {
                    t1_objects.push(o);
                } else {
                    t0_objects.push(o);
                }
                changes.push((vec![o], kind, annotated));
            }
            ChangeType::Exchange => {
                let (r0, r1) = (radius(rng), radius(rng));
                let (cx, cy) = place(rng, r0.max(r1))?;
                let a = new_object(rng, cx, cy, r0, &[texture.base], None);
                let b = new_object(rng, cx, cy, r1, &[texture.base, a.color], Some(a.kind));
                t0_objects.push(a);
                t1_objects.push(b);
                changes.push((vec![a, b], kind, annotated));
            }
        }
    }
    let s = cfg.max_shift as i64;
    let shift = (rng.random_range(-s..=s) as f64, rng.random_range(-s..=s) as f64);
    Some(Scene {
        texture,
        t0_objects,
        t1_objects,
        changes,
        shift,
    })
}

fn render(
    cfg: &SynthConfig,
    scene: &Scene,
    objects: &[Object],
    offset: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = cfg.image_size;
    let j = cfg.jitter;
    let sym = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
    let gain = 1.0 + sym(rng, j);
    let bias = sym(rng, j);
    let channel_gain = [0.0; 3].map(|_: f64| 1.0 + sym(rng, j / 2.0));
    let mut out = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5 - offset.0, y as f64 + 0.5 - offset.1);
            let mut c = scene.texture.at(px, py);
            // Later objects are drawn on top; layouts never overlap anyway.
            if let Some(o) = objects.iter().rev().find(|o| o.contains(px, py)) {
                c = o.color;
            }
            for k in 0..3 {
                let v = c[k] * gain * channel_gain[k] + bias + sym(rng, cfg.pixel_noise);
                // Quantise to 8 bits so in-memory and PNG round-tripped data agree.
                out[k * n * n + y * n + x] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
    }
    out
}

/// Generates sample `index` of the stream seeded with `seed`.
pub fn generate_one(cfg: &SynthConfig, seed: u64, index: u64) -> Result<ChangeSample> {
    cfg.validate()?;
    let mut sub = sample_seed(seed, index);
    for _ in 0..64 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let tex_seed = splitmix64(sub ^ cfg.background_seed.rotate_left(17));
        let Some(scene) = layout(cfg, &mut rng, tex_seed) else {
            sub = splitmix64(sub);
            continue;
        };
        let t0 = render(cfg, &scene, &scene.t0_objects, (0.0, 0.0), &mut rng);
        let t1 = render(cfg, &scene, &scene.t1_objects, scene.shift, &mut rng);
        let n = cfg.image_size;
        let mut mask = vec![0u8; n * n];
        for (objects, kind, annotated) in &scene.changes {
            if !annotated {
                continue;
            }
            let label = match cfg.label_mode {
                LabelMode::Binary => 1,
                LabelMode::ChangeType => kind.label(),
            };
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if objects.iter().any(|o| o.contains(px, py)) {
                        mask[y * n + x] = label;
                    }
                }
            }
        }
        return Ok(ChangeSample {
            name: format!("{index:05}"),
            height: n,
            width: n,
            t0,
            t1,
            mask,
            change_types: scene.changes.iter().map(|c| c.1).collect(),
        });
    }
    Err(Error::Data(format!(
        "could not place objects for sample {index}; reduce object counts or sizes"
    )))
}

/// `count` samples, deterministic in `(cfg, seed)`.
pub fn generate(cfg: &SynthConfig, seed: u64, count: usize) -> Result<Vec<ChangeSample>> {
    (0..count as u64).map(|i| generate_one(cfg, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthConfig {
        SynthConfig {
            jitter: 0.0,
            pixel_noise: 0.0,
            max_shift: 0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference splitmix64 stream seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(GOLDEN), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 7, 4).unwrap(), generate(&cfg, 7, 4).unwrap());
        assert_ne!(generate(&cfg, 7, 1).unwrap(), generate(&cfg, 8, 1).unwrap());
    }

    #[test]
    fn empty_scene_without_jitter_is_static() {
        let cfg = SynthConfig {
            distractors: [0, 0],
            changes: [0, 0],
            ..quiet()
        };
        for s in generate(&cfg, 1, 3).unwrap() {
            assert_eq!(s.t0, s.t1);
            assert!(s.mask.iter().all(|&m| m == 0));
            assert!(s.change_types.is_empty());
        }
    }

    #[test]
    fn disappear_only_masks_cover_objects_present_only_in_t0() {
        let cfg = SynthConfig {
            change_probs: ChangeProbs::only(ChangeType::Disappear),
            ..quiet()
        };
        for s in generate(&cfg, 3, 8).unwrap() {
            assert!(s.change_types.iter().all(|&t| t == ChangeType::Disappear));
            let px = s.pixels();
            let changed: Vec<usize> = (0..px).filter(|&i| s.mask[i] == 1).collect();
            assert!(!changed.is_empty());
            // Inside the mask t0 shows the object and t1 the smooth background,
            // so the images differ at every masked pixel and agree elsewhere.
            let differs = |i: usize| (0..3).any(|k| s.t0[k * px + i] != s.t1[k * px + i]);
            let diff_inside = changed.iter().filter(|&&i| differs(i)).count();
            assert!(diff_inside as f64 >= 0.95 * changed.len() as f64);
            assert!((0..px).filter(|&i| s.mask[i] == 0).all(|i| !differs(i)));
        }
    }

    #[test]
    fn swapped_disappear_data_is_appear_data() {
        let dis = SynthConfig {
            change_probs: ChangeProbs::only(ChangeType::Disappear),
            ..quiet()
        };
        let app = SynthConfig {
            change_probs: ChangeProbs::only(ChangeType::Appear),
            ..quiet()
        };
        // Same random draws: the type sampler consumes one uniform either way.
        let a = generate_one(&dis, 5, 0).unwrap().swapped();
        let b = generate_one(&app, 5, 0).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.t0, b.t0);
        assert_eq!(a.t1, b.t1);
    }

    #[test]
    fn annotation_noise_drops_masks() {
        let cfg = SynthConfig {
            annotation_noise: 1.0,
            ..SynthConfig::default()
        };
        for s in generate(&cfg, 2, 4).unwrap() {
            assert!(s.mask.iter().all(|&m| m == 0));
            assert!(!s.change_types.is_empty());
        }
    }

    #[test]
    fn change_type_labels() {
        let cfg = SynthConfig {
            label_mode: LabelMode::ChangeType,
            changes: [3, 3],
            ..SynthConfig::default()
        };
        for s in generate(&cfg, 4, 6).unwrap() {
            let labels: BTreeSet<u8> = s.mask.iter().copied().filter(|&m| m != 0).collect();
            let expected: BTreeSet<u8> = s.change_types.iter().map(|t| t.label()).collect();
            assert_eq!(labels, expected);
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            SynthConfig { image_size: 48, ..SynthConfig::default() },
            SynthConfig { image_size: 96 + 16, ..SynthConfig::default() },
            SynthConfig { changes: [2, 1], ..SynthConfig::default() },
            SynthConfig {
                change_probs: ChangeProbs { appear: 0.5, disappear: 0.2, exchange: 0.2 },
                ..SynthConfig::default()
            },
            SynthConfig { shapes: vec![], ..SynthConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let json = serde_json::to_string(&SynthConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<SynthConfig>(&json).unwrap(), SynthConfig::default());
    }
}
