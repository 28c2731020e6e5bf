//! Images for inspecting predictions and MTF branch responses.

use image::{Rgb, RgbImage};

use crate::data::io::planar_to_rgb;
use crate::data::{batch_tensors, ChangeSample};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::mtf::{Branch, BranchSet};
use crate::params::ParamStore;
use crate::tensor::NoGradGuard;
use crate::train::predict;

/// Colours for class indices 1.. (class 0 is left transparent).
pub const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 90, 240],
    [240, 200, 30],
    [200, 60, 220],
    [40, 210, 210],
];

/// Blends `mask` over `image` (planar RGB in `[0, 1]`) at 50 % opacity.
pub fn overlay(image: &[f32], mask: &[u8], width: usize, height: usize) -> RgbImage {
    let mut img = planar_to_rgb(image, width, height);
    for (i, px) in img.pixels_mut().enumerate() {
        if mask[i] != 0 {
            let c = PALETTE[(mask[i] as usize - 1) % PALETTE.len()];
            *px = Rgb([0, 1, 2].map(|k| ((px.0[k] as u16 + c[k] as u16) / 2) as u8));
        }
    }
    img
}

/// A class mask as an RGB image: black background, palette colours for changes.
pub fn colorize_mask(mask: &[u8], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let m = mask[y as usize * width + x as usize] as usize;
        if m == 0 {
            Rgb([0, 0, 0])
        } else {
            Rgb(PALETTE[(m - 1) % PALETTE.len()])
        }
    })
}

/// Masks predicted with one change branch (plus the info branch, when
/// configured) active at a time, followed by the full-model mask. Mirrors the
/// per-branch decomposition used to inspect what each branch detects.
pub fn branch_masks(net: &Network, params: &ParamStore, sample: &ChangeSample) -> Result<Vec<(String, Vec<u8>)>> {
    let configured = net.config.branches;
    let mut out = Vec::new();
    for branch in configured.iter().filter(|&b| b != Branch::Info) {
        let mut active = BranchSet::only(branch);
        active.set(Branch::Info, configured.contains(Branch::Info));
        let mask = predict(net, params, std::slice::from_ref(sample), 1, Some(active))?.remove(0);
        out.push((branch.name().to_string(), mask));
    }
    let full = predict(net, params, std::slice::from_ref(sample), 1, None)?.remove(0);
    out.push(("full".to_string(), full));
    Ok(out)
}

/// Channel-mean magnitude of one branch at one MTF level.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchMap {
    pub branch: Branch,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Per-branch response maps of the configured branches at `level`
/// (0 = finest fused level).
pub fn branch_maps(net: &Network, params: &ParamStore, sample: &ChangeSample, level: usize) -> Result<Vec<BranchMap>> {
    let _guard = NoGradGuard::new();
    let (t0, t1, _) = batch_tensors::<f32>(&[sample])?;
    let (f0, f1) = net.fusion_inputs(params, &t0, &t1)?;
    if level >= f0.len() {
        return Err(Error::invalid(format!("level {level} out of range; the MTF sees {} level(s)", f0.len())));
    }
    net.config
        .branches
        .iter()
        .map(|branch| {
            let act = net.mtf().branch_activation(params, &f0, &f1, branch)?.swap_remove(level);
            let s = act.shape();
            let plane = s.h() * s.w();
            let data = act.data();
            let values = (0..plane)
                .map(|i| (0..s.c()).map(|c| data[c * plane + i].abs()).sum::<f32>() / s.c() as f32)
                .collect();
            Ok(BranchMap {
                branch,
                height: s.h(),
                width: s.w(),
                values,
            })
        })
        .collect()
}

/// Renders maps as heat images scaled to `width × height` (nearest
/// neighbour). All maps share one normalisation so their magnitudes compare.
pub fn render_heatmaps(maps: &[BranchMap], width: usize, height: usize) -> Vec<RgbImage> {
    let peak = maps
        .iter()
        .flat_map(|m| m.values.iter().copied())
        .fold(0.0f32, f32::max)
        .max(f32::MIN_POSITIVE);
    maps.iter()
        .map(|m| {
            RgbImage::from_fn(width as u32, height as u32, |x, y| {
                let sy = y as usize * m.height / height;
                let sx = x as usize * m.width / width;
                heat(m.values[sy * m.width + sx] / peak)
            })
        })
        .collect()
}

/// Black → red → yellow → white ramp.
fn heat(t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(t), ch(t - 1.0), ch(t - 2.0)])
}
