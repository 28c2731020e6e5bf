//! Change-detection samples: synthetic generation, on-disk loading,
//! augmentation and splitting.

pub mod augment;
pub mod io;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub use augment::{augment, AugmentOp};
pub use io::{load_dataset, write_dataset};
pub use synth::{generate, generate_one, splitmix64, SynthConfig};

/// The three kinds of scene change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeType {
    /// Object only in `t1`.
    Appear,
    /// Object only in `t0`.
    Disappear,
    /// Different objects at the same place.
    Exchange,
}

impl ChangeType {
    pub const ALL: [ChangeType; 3] = [ChangeType::Appear, ChangeType::Disappear, ChangeType::Exchange];

    /// Class index in change-type label mode.
    pub fn label(self) -> u8 {
        match self {
            ChangeType::Appear => 1,
            ChangeType::Disappear => 2,
            ChangeType::Exchange => 3,
        }
    }
}

impl fmt::Display for ChangeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChangeType::Appear => "appear",
            ChangeType::Disappear => "disappear",
            ChangeType::Exchange => "exchange",
        })
    }
}

/// How changed pixels are labelled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// 0 background, 1 change.
    #[default]
    Binary,
    /// 0 background, 1 appear, 2 disappear, 3 exchange.
    ChangeType,
}

impl LabelMode {
    pub fn num_classes(self) -> usize {
        match self {
            LabelMode::Binary => 2,
            LabelMode::ChangeType => 4,
        }
    }
}

/// An image pair with its label mask. Images are `3 × H × W` planar RGB in
/// `[0, 1]`; the mask is `H × W` class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeSample {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub t0: Vec<f32>,
    pub t1: Vec<f32>,
    pub mask: Vec<u8>,
    pub change_types: BTreeSet<ChangeType>,
}

impl ChangeSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Fraction of non-background mask pixels.
    pub fn change_ratio(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }

    /// The pair with `t0` and `t1` exchanged (mask unchanged).
    pub fn swapped(&self) -> ChangeSample {
        ChangeSample {
            t0: self.t1.clone(),
            t1: self.t0.clone(),
            ..self.clone()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let px = self.pixels();
        if self.t0.len() != 3 * px || self.t1.len() != 3 * px || self.mask.len() != px {
            return Err(Error::Data(format!("sample {} has inconsistent buffer sizes", self.name)));
        }
        if let Some(&bad) = self.mask.iter().find(|&&m| m as usize >= num_classes) {
            return Err(Error::Data(format!(
                "sample {} has label {bad} but the model has {num_classes} classes",
                self.name
            )));
        }
        Ok(())
    }
}

/// Stacks samples into `(t0, t1, labels)` batch tensors.
pub fn batch_tensors<E: Scalar>(samples: &[&ChangeSample]) -> Result<(Tensor<E>, Tensor<E>, Vec<u32>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::Data("all samples in a batch must share one size".into()));
    }
    let shape = Shape::new(samples.len(), 3, h, w);
    let stack = |f: fn(&ChangeSample) -> &[f32]| -> Vec<E> {
        samples
            .iter()
            .flat_map(|s| f(s).iter().map(|&v| E::from_f64_lossy(v as f64)))
            .collect()
    };
    let t0 = Tensor::from_vec(shape, stack(|s| &s.t0))?;
    let t1 = Tensor::from_vec(shape, stack(|s| &s.t1))?;
    let labels = samples.iter().flat_map(|s| s.mask.iter().map(|&m| m as u32)).collect();
    Ok((t0, t1, labels))
}

/// Seeded shuffled split; the train side gets `ceil(len · fraction)` samples.
pub fn split<T: Clone>(samples: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (samples.len() as f64 * train_fraction).ceil() as usize;
    let n_train = n_train.min(samples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Per-class pixel totals over a set of masks.
pub fn class_counts<'a>(masks: impl IntoIterator<Item = &'a [u8]>, num_classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; num_classes];
    for mask in masks {
        for &m in mask {
            *counts
                .get_mut(m as usize)
                .ok_or_else(|| Error::Data(format!("label {m} out of range for {num_classes} classes")))? += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b) = split(&v, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<u32> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, v);
        assert_eq!(split(&v, 0.8, 3).unwrap(), (a, b));
        let (a, b) = split(&[1, 2, 3], 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(split(&v, 1.0, 0).is_err());
        assert!(split(&v, 0.0, 0).is_err());
    }

    #[test]
    fn class_counts_rejects_out_of_range() {
        assert_eq!(class_counts([&[0u8, 1, 1][..]], 2).unwrap(), vec![1, 2]);
        assert!(class_counts([&[2u8][..]], 2).is_err());
    }
}
