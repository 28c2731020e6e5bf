//! Spatial fusion of a pyramid into one map (FPN-style top-down pathway).
//!
//! Only the coarsest `levels` entries are used, so `levels = 1` keeps just the
//! stride-32 map. Each used level gets a 1×1 lateral conv; from coarsest to
//! finest the running map is 2× upsampled and added to the next lateral; each
//! merged map is smoothed by a 3×3 conv; all smoothed maps are upsampled to the
//! finest used resolution, concatenated, and reduced by a 1×1 conv + ReLU.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::tensor::{add, bilinear_upsample, concat_channels, relu, upsample_pow2, Scalar, Tensor};

/// Inner width of the top-down pathway at full scale.
pub const DEFAULT_INNER: usize = 256;
/// Output width at full scale.
pub const DEFAULT_OUT: usize = 512;

#[derive(Clone, Debug)]
pub struct Msf {
    levels: usize,
    /// Index of the first (finest) pyramid entry used.
    first: usize,
    laterals: Vec<Conv>,
    smooth: Vec<Conv>,
    fuse: Conv,
    pub inner_channels: usize,
    pub out_channels: usize,
}

impl Msf {
    /// `widths` lists every pyramid level's channels, finest first.
    pub fn new(
        widths: &[usize],
        levels: usize,
        inner_channels: usize,
        out_channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if levels == 0 || levels > widths.len() || levels > 4 {
            return Err(Error::Config(format!(
                "msf_levels must be in 1..={}, got {levels}",
                widths.len().min(4)
            )));
        }
        let first = widths.len() - levels;
        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for (k, &c) in widths.iter().enumerate().skip(first) {
            laterals.push(Conv::pointwise(store, &format!("msf.lateral{k}"), c, inner_channels, rng)?);
            smooth.push(Conv::same3(store, &format!("msf.smooth{k}"), inner_channels, inner_channels, true, rng)?);
        }
        let fuse = Conv::pointwise(store, "msf.fuse", inner_channels * levels, out_channels, rng)?;
        Ok(Msf {
            levels,
            first,
            laterals,
            smooth,
            fuse,
            inner_channels,
            out_channels,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Pyramid index of the finest level used; its stride is the output stride.
    pub fn finest_level(&self) -> usize {
        self.first
    }

    /// Fuses a full pyramid, reading only its coarsest `levels` entries.
    pub fn fuse<E: Scalar>(&self, params: &ParamStore<E>, pyramid: &[Tensor<E>]) -> Result<Tensor<E>> {
        if pyramid.len() != self.first + self.levels {
            return Err(Error::invalid(format!(
                "MSF expects a {}-level pyramid, got {}",
                self.first + self.levels,
                pyramid.len()
            )));
        }
        self.fuse_used(params, &pyramid[self.first..])
    }

    /// Fuses exactly the used levels (pyramid entries `finest_level()..`).
    pub fn fuse_used<E: Scalar>(&self, params: &ParamStore<E>, used: &[Tensor<E>]) -> Result<Tensor<E>> {
        if used.len() != self.levels {
            return Err(Error::invalid(format!("MSF uses {} levels, got {}", self.levels, used.len())));
        }
        let lateral = |i: usize| self.laterals[i].forward(params, &used[i]);

        // Top-down: coarsest first, then reversed so index i is finest-first.
        let top = self.levels - 1;
        let mut merged = vec![lateral(top)?];
        for i in (0..top).rev() {
            let up = bilinear_upsample(merged.last().expect("non-empty"), 2)?;
            let lat = lateral(i)?;
            if up.shape() != lat.shape() {
                return Err(Error::ShapeMismatch {
                    op: "msf top-down",
                    left: up.shape(),
                    right: lat.shape(),
                });
            }
            merged.push(add(&up, &lat)?);
        }
        merged.reverse();

        let mut gathered = Vec::with_capacity(self.levels);
        for (i, m) in merged.iter().enumerate() {
            let s = self.smooth[i].forward(params, m)?;
            gathered.push(upsample_pow2(&s, 1 << i)?);
        }
        Ok(relu(&self.fuse.forward(params, &concat_channels(&gathered)?)?))
    }
}
