//! Segmentation heads: FCN and a reduced ASPP.
//!
//! Both map the fused feature map to `N` class logits and bilinearly upsample
//! them to the input resolution. Softmax is left to the loss / argmax.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::tensor::{
    broadcast_spatial, concat_channels, global_avg_pool, relu, upsample_pow2, Conv2dSpec, Scalar, Tensor,
};

/// Nominal atrous rates, clipped to the feature size at run time.
pub const ASPP_RATES: [usize; 3] = [6, 12, 18];

/// Largest supported logits upsampling factor (the stride-32 map of a
/// single-level MSF).
pub const MAX_UPSAMPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Fcn,
    Aspp,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Fcn => "fcn",
            HeadKind::Aspp => "aspp",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn" => Ok(HeadKind::Fcn),
            "aspp" => Ok(HeadKind::Aspp),
            _ => Err(Error::Config(format!("unknown head {s:?} (expected fcn or aspp)"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Fcn(Conv),
    Aspp {
        pointwise: Conv,
        atrous: Vec<Conv>,
        pool: Conv,
        project: Conv,
    },
}

#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub in_channels: usize,
    body: Body,
    classifier: Conv,
}

/// Atrous rate actually used on an `h × w` map.
pub fn clipped_rate(rate: usize, h: usize, w: usize) -> usize {
    rate.min(h.min(w).saturating_sub(1)).max(1)
}

impl Head {
    /// The interior width is `in_channels / 4`.
    pub fn new(
        kind: HeadKind,
        in_channels: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let inner = (in_channels / 4).max(1);
        let body = match kind {
            HeadKind::Fcn => Body::Fcn(Conv::same3(store, "head.conv", in_channels, inner, true, rng)?),
            HeadKind::Aspp => {
                let pointwise = Conv::pointwise(store, "head.aspp.b0", in_channels, inner, rng)?;
                let atrous = ASPP_RATES
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        Conv::new(
                            store,
                            &format!("head.aspp.b{}", i + 1),
                            in_channels,
                            inner,
                            3,
                            Conv2dSpec::dilated(r),
                            true,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pool = Conv::pointwise(store, "head.aspp.pool", in_channels, inner, rng)?;
                let project = Conv::pointwise(store, "head.aspp.project", inner * 5, inner, rng)?;
                Body::Aspp {
                    pointwise,
                    atrous,
                    pool,
                    project,
                }
            }
        };
        let classifier = Conv::pointwise(store, "head.classifier", inner, num_classes, rng)?;
        Ok(Head {
            kind,
            num_classes,
            in_channels,
            body,
            classifier,
        })
    }

    /// The ASPP branch outputs before concatenation, in the order
    /// pointwise, atrous rates…, pooled.
    pub fn aspp_branches<E: Scalar>(&self, params: &ParamStore<E>, x: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let Body::Aspp {
            pointwise, atrous, pool, ..
        } = &self.body
        else {
            return Err(Error::invalid("not an ASPP head"));
        };
        let (h, w) = (x.shape().h(), x.shape().w());
        let mut out = vec![pointwise.forward_relu(params, x)?];
        for conv in atrous {
            let rate = clipped_rate(conv.spec.dilation, h, w);
            out.push(relu(&conv.forward_with(params, x, Conv2dSpec::dilated(rate))?));
        }
        let pooled = pool.forward_relu(params, &global_avg_pool(x))?;
        out.push(broadcast_spatial(&pooled, h, w)?);
        Ok(out)
    }

    /// Class logits at the fused map's resolution.
    pub fn class_scores<E: Scalar>(&self, params: &ParamStore<E>, fused: &Tensor<E>) -> Result<Tensor<E>> {
        if fused.shape().c() != self.in_channels {
            return Err(Error::invalid(format!(
                "head expects {} input channels, got {}",
                self.in_channels,
                fused.shape()
            )));
        }
        let interior = match &self.body {
            Body::Fcn(conv) => conv.forward_relu(params, fused)?,
            Body::Aspp { project, .. } => {
                let branches = self.aspp_branches(params, fused)?;
                project.forward_relu(params, &concat_channels(&branches)?)?
            }
        };
        self.classifier.forward(params, &interior)
    }

    /// Logits upsampled to `(out_h, out_w)`; the ratio to the fused map must
    /// be the same power of two on both axes and at most [`MAX_UPSAMPLE`].
    pub fn predict_logits<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        fused: &Tensor<E>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<E>> {
        let factor = upsample_factor(fused.shape().h(), fused.shape().w(), out_h, out_w)?;
        upsample_pow2(&self.class_scores(params, fused)?, factor)
    }
}

/// The power-of-two factor taking `h × w` to `out_h × out_w`.
pub fn upsample_factor(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<usize> {
    let ok = h > 0 && w > 0 && out_h % h == 0 && out_w % w == 0 && out_h / h == out_w / w;
    let factor = if ok { out_h / h } else { 0 };
    if !factor.is_power_of_two() || factor > MAX_UPSAMPLE {
        return Err(Error::invalid(format!(
            "cannot upsample {h}x{w} logits to {out_h}x{out_w}: need a power-of-two factor up to {MAX_UPSAMPLE}"
        )));
    }
    Ok(factor)
}

/// Per-pixel argmax over channels; ties resolve to the lower class index.
pub fn predict_mask<E: Scalar>(logits: &Tensor<E>) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    let data = logits.data();
    let mut out = Vec::with_capacity(s.n() * plane);
    for n in 0..s.n() {
        let base = n * s.c() * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = data[base + p];
            for c in 1..s.c() {
                let v = data[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::tensor::{softmax, Shape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(kind: HeadKind, cin: usize, n: usize) -> (Head, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (Head::new(kind, cin, n, &mut store, &mut rng).unwrap(), store)
    }

    #[test]
    fn fcn_full_width_shapes() {
        let (head, params) = build(HeadKind::Fcn, 512, 2);
        assert_eq!(params.by_name("head.conv.weight").unwrap().shape(), Shape::new(128, 512, 3, 3));
        let fused = Tensor::<f32>::full(Shape::new(1, 512, 64, 64), 0.01);
        let logits = head.predict_logits(&params, &fused, 256, 256).unwrap();
        assert_eq!(logits.shape(), Shape::new(1, 2, 256, 256));
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        for kind in [HeadKind::Fcn, HeadKind::Aspp] {
            let (head, mut params) = build(kind, 8, 3);
            for id in params.ids().collect::<Vec<_>>() {
                let n = params.get(id).shape().numel();
                params.set(id, vec![0.0; n]).unwrap();
            }
            let fused = random_tensor::<f32>(Shape::new(1, 8, 4, 4), 1);
            let logits = head.predict_logits(&params, &fused, 16, 16).unwrap();
            assert!(softmax(&logits).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn aspp_rates_agree_on_constant_interior() {
        let (head, mut params) = build(HeadKind::Aspp, 4, 2);
        // Give every atrous branch the same weights.
        let w = params.by_name("head.aspp.b1.weight").unwrap().to_vec();
        for b in ["head.aspp.b2.weight", "head.aspp.b3.weight"] {
            let id = params.id(b).unwrap();
            params.set(id, w.clone()).unwrap();
        }
        let size = 48;
        let x = Tensor::<f32>::full(Shape::new(1, 4, size, size), 0.3);
        let branches = head.aspp_branches(&params, &x).unwrap();
        let margin = clipped_rate(18, size, size);
        for r in margin..size - margin {
            for c in margin..size - margin {
                let at = |t: &Tensor<f32>| {
                    (0..t.shape().c())
                        .map(|ch| t.data()[(ch * size + r) * size + c])
                        .collect::<Vec<_>>()
                };
                assert_eq!(at(&branches[1]), at(&branches[2]));
                assert_eq!(at(&branches[1]), at(&branches[3]));
            }
        }
        assert_eq!(clipped_rate(18, 16, 16), 15);
        assert_eq!(clipped_rate(6, 16, 16), 6);
    }

    #[test]
    fn upsample_factor_rules() {
        assert_eq!(upsample_factor(64, 64, 256, 256).unwrap(), 4);
        assert_eq!(upsample_factor(2, 2, 64, 64).unwrap(), 32);
        assert!(upsample_factor(1, 1, 64, 64).is_err());
        assert!(upsample_factor(3, 3, 9, 9).is_err());
        assert!(upsample_factor(4, 8, 16, 16).is_err());
    }

    #[test]
    fn argmax_examples() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 2), vec![2.0, 0.5, 1.0, 0.5]).unwrap();
        assert_eq!(predict_mask(&t), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn argmax_matches_loop_and_ignores_shift(seed in 0u64..1000, shift in -5.0f32..5.0) {
            let logits = random_tensor::<f32>(Shape::new(2, 3, 3, 4), seed);
            let mask = predict_mask(&logits);
            let d = logits.data();
            for n in 0..2 {
                for p in 0..12 {
                    let vals: Vec<f32> = (0..3).map(|c| d[(n * 3 + c) * 12 + p]).collect();
                    let mut best = 0;
                    for c in 0..3 {
                        if vals[c] > vals[best] { best = c; }
                    }
                    prop_assert_eq!(mask[n * 12 + p] as usize, best);
                }
            }
            // Exact monotone maps: power-of-two scaling, and integer shifts of
            // integer-valued logits.
            let halved = Tensor::from_vec(logits.shape(), d.iter().map(|v| v * 0.5).collect()).unwrap();
            prop_assert_eq!(predict_mask(&halved), mask);
            let ints = Tensor::from_vec(logits.shape(), d.iter().map(|v| (v * 4.0).round()).collect()).unwrap();
            let moved = Tensor::from_vec(logits.shape(), ints.data().iter().map(|v| v + shift.round()).collect()).unwrap();
            prop_assert_eq!(predict_mask(&moved), predict_mask(&ints));
        }
    }
}
