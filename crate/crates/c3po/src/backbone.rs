//! Siamese hierarchical encoder producing a four-level feature pyramid.
//!
//! The built-in encoders are small plain-conv networks: a two-conv stem
//! reaching stride 4, then three stages that each halve the resolution.
//! Every conv is 3×3 and followed by a ReLU. Which encoder is built is chosen
//! by name through [`BackboneKind`], so alternatives can be added without
//! touching the fusion modules downstream.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::tensor::{concat_batch, narrow_batch, Conv2dSpec, Scalar, Tensor};

/// Strides of the pyramid levels relative to the input image.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Default channel widths per level, sized so a 30-epoch run on 64×64
/// synthetic pairs takes a couple of minutes on one CPU core.
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Encoder registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackboneKind {
    /// Two 3×3 convs per stage.
    Toy,
    /// Three 3×3 convs per stage.
    ToyDeep,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 2] = [BackboneKind::Toy, BackboneKind::ToyDeep];

    fn convs_per_stage(self) -> usize {
        match self {
            BackboneKind::Toy => 2,
            BackboneKind::ToyDeep => 3,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Toy => "toy",
            BackboneKind::ToyDeep => "toy_deep",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone {s:?} (known: toy, toy_deep)")))
    }
}

impl TryFrom<String> for BackboneKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackboneKind> for String {
    fn from(k: BackboneKind) -> String {
        k.to_string()
    }
}

/// Feature maps at strides 4, 8, 16 and 32 (finest first).
#[derive(Clone, Debug)]
pub struct FeaturePyramid<E: Scalar = f32> {
    pub levels: Vec<Tensor<E>>,
}

impl<E: Scalar> FeaturePyramid<E> {
    pub fn new(levels: Vec<Tensor<E>>) -> Self {
        FeaturePyramid { levels }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub widths: [usize; 4],
    stem: [Conv; 2],
    stages: Vec<Vec<Conv>>,
}

impl Backbone {
    /// Registers the encoder's parameters under `prefix`.
    pub fn new(
        kind: BackboneKind,
        in_channels: usize,
        widths: [usize; 4],
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.contains(&0) || widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Build {
                stage: "backbone",
                message: format!("channel widths must be positive and non-decreasing, got {widths:?}"),
            });
        }
        let down = Conv2dSpec::new(2, 1);
        let stem = [
            Conv::new(store, &format!("{prefix}.stem.0"), in_channels, widths[0], 3, down, true, rng)?,
            Conv::new(store, &format!("{prefix}.stem.1"), widths[0], widths[0], 3, down, true, rng)?,
        ];
        let mut stages = Vec::with_capacity(3);
        for s in 1..4 {
            let mut convs = Vec::new();
            for i in 0..kind.convs_per_stage() {
                let name = format!("{prefix}.stage{s}.{i}");
                let (cin, spec) = if i == 0 {
                    (widths[s - 1], down)
                } else {
                    (widths[s], Conv2dSpec::new(1, 1))
                };
                convs.push(Conv::new(store, &name, cin, widths[s], 3, spec, true, rng)?);
            }
            stages.push(convs);
        }
        Ok(Backbone {
            kind,
            widths,
            stem,
            stages,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.stem[0].in_channels
    }

    /// Encodes an `(N, C, H, W)` batch; `H` and `W` must be multiples of 32.
    pub fn encode<E: Scalar>(&self, params: &ParamStore<E>, image: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        let s = image.shape();
        if s.c() != self.in_channels() {
            return Err(Error::invalid(format!(
                "backbone expects {} input channels, got image {s}",
                self.in_channels()
            )));
        }
        if s.h() % 32 != 0 || s.w() % 32 != 0 || s.h() == 0 || s.w() == 0 {
            let pad = |v: usize| v.div_ceil(32).max(1) * 32 - v;
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by 32; pad by {} rows and {} columns",
                s.h(),
                s.w(),
                pad(s.h()),
                pad(s.w())
            )));
        }
        let mut x = self.stem[0].forward_relu(params, image)?;
        x = self.stem[1].forward_relu(params, &x)?;
        let mut levels = vec![x.clone()];
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward_relu(params, &x)?;
            }
            levels.push(x.clone());
        }
        Ok(FeaturePyramid::new(levels))
    }
}

/// One or two backbones applied to the two temporal images.
#[derive(Clone, Debug)]
pub struct SiameseEncoder {
    first: Backbone,
    second: Option<Backbone>,
}

impl SiameseEncoder {
    /// `share_weights` registers one encoder under `backbone.*`; otherwise
    /// two independent ones under `backbone.t0.*` and `backbone.t1.*`.
    pub fn new(
        kind: BackboneKind,
        in_channels: usize,
        widths: [usize; 4],
        share_weights: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if share_weights {
            Ok(SiameseEncoder {
                first: Backbone::new(kind, in_channels, widths, "backbone", store, rng)?,
                second: None,
            })
        } else {
            Ok(SiameseEncoder {
                first: Backbone::new(kind, in_channels, widths, "backbone.t0", store, rng)?,
                second: Some(Backbone::new(kind, in_channels, widths, "backbone.t1", store, rng)?),
            })
        }
    }

    pub fn shares_weights(&self) -> bool {
        self.second.is_none()
    }

    pub fn widths(&self) -> [usize; 4] {
        self.first.widths
    }

    /// Encodes a single image stream with the first (or only) backbone.
    pub fn encode<E: Scalar>(&self, params: &ParamStore<E>, image: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        self.first.encode(params, image)
    }

    /// Pyramids for `t0` and `t1`. With shared weights both images run as
    /// one stacked batch; per-sample results are identical to separate runs.
    pub fn encode_pair<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        t0: &Tensor<E>,
        t1: &Tensor<E>,
    ) -> Result<(FeaturePyramid<E>, FeaturePyramid<E>)> {
        if t0.shape() != t1.shape() {
            return Err(Error::ShapeMismatch {
                op: "encode_pair",
                left: t0.shape(),
                right: t1.shape(),
            });
        }
        match &self.second {
            None => {
                let n = t0.shape().n();
                let both = self.first.encode(params, &concat_batch(&[t0.clone(), t1.clone()])?)?;
                let split = |start| -> Result<FeaturePyramid<E>> {
                    Ok(FeaturePyramid::new(
                        both.levels
                            .iter()
                            .map(|l| narrow_batch(l, start, n))
                            .collect::<Result<_>>()?,
                    ))
                };
                Ok((split(0)?, split(n)?))
            }
            Some(second) => Ok((self.first.encode(params, t0)?, second.encode(params, t1)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(share: bool, seed: u64) -> (SiameseEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = SiameseEncoder::new(BackboneKind::Toy, 3, DEFAULT_WIDTHS, share, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn image(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let t = random_tensor::<f32>(Shape::new(n, 3, size, size), seed);
        Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let (enc, params) = encoder(true, 1);
        let p = enc.encode(&params, &image(1, 64, 2)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.shape().c(), l.shape().h(), l.shape().w())).collect();
        let w = DEFAULT_WIDTHS;
        assert_eq!(dims, vec![(w[0], 16, 16), (w[1], 8, 8), (w[2], 4, 4), (w[3], 2, 2)]);
    }

    #[test]
    fn pyramid_shapes_for_256_batch_4() {
        // Each stride-2 3×3 conv with padding 1 maps n to ceil(n / 2).
        let expected: Vec<_> = STRIDES
            .iter()
            .zip(DEFAULT_WIDTHS)
            .map(|(&s, c)| Shape::new(4, c, 256usize.div_ceil(s), 256usize.div_ceil(s)))
            .collect();
        let (enc, params) = encoder(true, 1);
        let p = enc.encode(&params, &image(4, 256, 3)).unwrap();
        assert_eq!(p.levels.iter().map(|l| l.shape()).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn rejects_indivisible_with_padding_hint() {
        let (enc, params) = encoder(true, 1);
        let err = enc.encode(&params, &Tensor::zeros(Shape::new(1, 3, 70, 64))).unwrap_err();
        assert!(err.to_string().contains("pad by 26 rows and 0 columns"), "{err}");
    }

    #[test]
    fn shared_pair_is_deterministic_and_swaps() {
        let (enc, params) = encoder(true, 4);
        let (a, b) = (image(2, 64, 5), image(2, 64, 6));
        let (p0, p1) = enc.encode_pair(&params, &a, &b).unwrap();
        let (q0, q1) = enc.encode_pair(&params, &b, &a).unwrap();
        let single = enc.encode(&params, &a).unwrap();
        for k in 0..4 {
            assert_eq!(p0.levels[k].data(), q1.levels[k].data());
            assert_eq!(p1.levels[k].data(), q0.levels[k].data());
            assert_eq!(p0.levels[k].data(), single.levels[k].data());
        }
        let (r0, r1) = enc.encode_pair(&params, &a, &a).unwrap();
        assert_eq!(r0.levels[3].data(), r1.levels[3].data());
    }

    #[test]
    fn unshared_pair_differs_on_identical_inputs() {
        let (enc, params) = encoder(false, 7);
        assert!(!enc.shares_weights());
        let a = image(1, 64, 8);
        let (p0, p1) = enc.encode_pair(&params, &a, &a).unwrap();
        assert!(p0.levels.iter().zip(&p1.levels).any(|(x, y)| x.data() != y.data()));
        assert!(params.names().all(|n| n.starts_with("backbone.t0.") || n.starts_with("backbone.t1.")));
    }

    #[test]
    fn pair_shape_mismatch_is_rejected() {
        let (enc, params) = encoder(true, 1);
        let err = enc
            .encode_pair(&params, &image(1, 64, 1), &image(1, 32, 1))
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn parameter_budget() {
        for kind in BackboneKind::ALL {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Backbone::new(kind, 3, DEFAULT_WIDTHS, "backbone", &mut store, &mut rng).unwrap();
            assert!(store.num_elements() < 2_000_000, "{kind}: {}", store.num_elements());
        }
    }

    #[test]
    fn registry_names_round_trip() {
        for kind in BackboneKind::ALL {
            assert_eq!(kind.to_string().parse::<BackboneKind>().unwrap(), kind);
        }
        assert!("vgg16".parse::<BackboneKind>().is_err());
    }
}
