//! Assembly of backbone → MTF → MSF → head for each fusion position.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, SiameseEncoder, DEFAULT_WIDTHS};
use crate::checkpoint::Entry;
use crate::error::{Error, Result};
use crate::head::{Head, HeadKind};
use crate::msf::Msf;
use crate::mtf::{BranchConfig, BranchSet, Mtf};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

/// Channels of the raw images.
pub const IMAGE_CHANNELS: usize = 3;

/// Where the two temporal streams are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPosition {
    /// On the raw images; one backbone pass afterwards.
    Input,
    /// Per pyramid level, between backbone and MSF.
    #[default]
    PostBackbone,
    /// On the two MSF outputs (MSF parameters shared).
    PostMsf,
    /// On the two full-resolution logit maps, before softmax.
    PostHead,
}

impl FusionPosition {
    pub const ALL: [FusionPosition; 4] = [
        FusionPosition::Input,
        FusionPosition::PostBackbone,
        FusionPosition::PostMsf,
        FusionPosition::PostHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionPosition::Input => "input",
            FusionPosition::PostBackbone => "post_backbone",
            FusionPosition::PostMsf => "post_msf",
            FusionPosition::PostHead => "post_head",
        }
    }
}

impl fmt::Display for FusionPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionPosition::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion position {s:?}")))
    }
}

/// Architecture and loss settings. Widths default to a desk-scale profile;
/// set `msf_channels = 256`, `fused_channels = 512` for the full-size layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub widths: [usize; 4],
    pub branches: BranchSet,
    pub fusion_position: FusionPosition,
    pub msf_levels: usize,
    /// Width of the MSF lateral / smoothing convs.
    pub msf_channels: usize,
    /// Width of the MSF output fed to the head.
    pub fused_channels: usize,
    pub head: HeadKind,
    pub num_classes: usize,
    pub share_backbone: bool,
    pub share_info_conv: bool,
    pub share_change_conv: bool,
    pub use_weighted_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Toy,
            widths: DEFAULT_WIDTHS,
            branches: BranchSet::ALL,
            fusion_position: FusionPosition::PostBackbone,
            msf_levels: 4,
            msf_channels: 32,
            fused_channels: 64,
            head: HeadKind::Fcn,
            num_classes: 2,
            share_backbone: true,
            share_info_conv: true,
            share_change_conv: true,
            use_weighted_loss: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn branch_config(&self) -> BranchConfig {
        BranchConfig {
            branches: self.branches,
            share_change_conv: self.share_change_conv,
            share_info_conv: self.share_info_conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if !(1..=4).contains(&self.msf_levels) {
            return Err(Error::Config(format!("msf_levels must be in 1..=4, got {}", self.msf_levels)));
        }
        if self.msf_channels == 0 || self.fused_channels < 4 {
            return Err(Error::Config("msf_channels must be positive and fused_channels at least 4".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("branch set is empty".into()));
        }
        Ok(())
    }
}

/// Counts of work done during a forward pass, for structural audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    /// Images pushed through a backbone, summed over calls.
    pub backbone_images: usize,
    pub msf_calls: usize,
    pub head_calls: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    encoder: SiameseEncoder,
    mtf: Mtf,
    msf: Msf,
    head: Head,
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Build { .. } => e,
        other => Error::Build {
            stage: name,
            message: other.to_string(),
        },
    }
}

impl Network {
    /// Builds the network and its freshly initialised parameters from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config;
        let encoder = SiameseEncoder::new(c.backbone, IMAGE_CHANNELS, c.widths, c.share_backbone, &mut store, &mut rng)
            .map_err(stage("backbone"))?;
        if c.fusion_position == FusionPosition::Input && !c.share_backbone {
            return Err(Error::Build {
                stage: "backbone",
                message: "input-level fusion leaves a single stream; share_backbone must be true".into(),
            });
        }
        // Per-level fusion covers only the levels the MSF reads, so every
        // MTF parameter receives a gradient.
        let first_used = c.widths.len() - c.msf_levels;
        let (mtf_first, mtf_channels): (usize, Vec<usize>) = match c.fusion_position {
            FusionPosition::Input => (0, vec![IMAGE_CHANNELS]),
            FusionPosition::PostBackbone => (first_used, c.widths[first_used..].to_vec()),
            FusionPosition::PostMsf => (0, vec![c.fused_channels]),
            FusionPosition::PostHead => (0, vec![c.num_classes]),
        };
        let mtf = Mtf::new_at(mtf_first, &mtf_channels, c.branch_config(), &mut store, &mut rng).map_err(stage("mtf"))?;
        let msf = Msf::new(&c.widths, c.msf_levels, c.msf_channels, c.fused_channels, &mut store, &mut rng)
            .map_err(stage("msf"))?;
        let head = Head::new(c.head, c.fused_channels, c.num_classes, &mut store, &mut rng).map_err(stage("head"))?;
        Ok((
            Network {
                config: c.clone(),
                encoder,
                mtf,
                msf,
                head,
            },
            store,
        ))
    }

    pub fn mtf(&self) -> &Mtf {
        &self.mtf
    }

    /// The `(t0, t1)` tensors the MTF module receives, one pair per level.
    pub fn fusion_inputs<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        t0: &Tensor<E>,
        t1: &Tensor<E>,
    ) -> Result<(Vec<Tensor<E>>, Vec<Tensor<E>>)> {
        let (h, w) = (t0.shape().h(), t0.shape().w());
        if self.config.fusion_position == FusionPosition::Input {
            return Ok((vec![t0.clone()], vec![t1.clone()]));
        }
        let (p0, p1) = self.encoder.encode_pair(params, t0, t1)?;
        match self.config.fusion_position {
            FusionPosition::PostBackbone => {
                let first = self.msf.finest_level();
                Ok((p0.levels[first..].to_vec(), p1.levels[first..].to_vec()))
            }
            FusionPosition::PostMsf => Ok((vec![self.msf.fuse(params, &p0.levels)?], vec![self.msf.fuse(params, &p1.levels)?])),
            _ => {
                let logits = |p: &[Tensor<E>]| self.head.predict_logits(params, &self.msf.fuse(params, p)?, h, w);
                Ok((vec![logits(&p0.levels)?], vec![logits(&p1.levels)?]))
            }
        }
    }

    /// Full-resolution logits for a batch of pairs.
    pub fn forward<E: Scalar>(&self, params: &ParamStore<E>, t0: &Tensor<E>, t1: &Tensor<E>) -> Result<Tensor<E>> {
        self.forward_traced(params, t0, t1, self.config.branches, &mut ForwardTrace::default())
    }

    /// Like [`forward`](Self::forward) with only `active` MTF branches summed.
    pub fn forward_active<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        t0: &Tensor<E>,
        t1: &Tensor<E>,
        active: BranchSet,
    ) -> Result<Tensor<E>> {
        self.forward_traced(params, t0, t1, active, &mut ForwardTrace::default())
    }

    pub fn forward_traced<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        t0: &Tensor<E>,
        t1: &Tensor<E>,
        active: BranchSet,
        trace: &mut ForwardTrace,
    ) -> Result<Tensor<E>> {
        if t0.shape() != t1.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: t0.shape(),
                right: t1.shape(),
            });
        }
        let (h, w) = (t0.shape().h(), t0.shape().w());
        let n = t0.shape().n();
        let msf = |p: &[Tensor<E>], trace: &mut ForwardTrace| {
            trace.msf_calls += 1;
            self.msf.fuse(params, p)
        };
        let head = |x: &Tensor<E>, trace: &mut ForwardTrace| {
            trace.head_calls += 1;
            self.head.predict_logits(params, x, h, w)
        };
        match self.config.fusion_position {
            FusionPosition::Input => {
                let x = self
                    .mtf
                    .fuse_active(params, std::slice::from_ref(t0), std::slice::from_ref(t1), active)?;
                trace.backbone_images += n;
                let p = self.encoder.encode(params, &x[0])?;
                let fused = msf(&p.levels, trace)?;
                head(&fused, trace)
            }
            FusionPosition::PostBackbone => {
                trace.backbone_images += 2 * n;
                let (p0, p1) = self.encoder.encode_pair(params, t0, t1)?;
                let first = self.msf.finest_level();
                let merged = self
                    .mtf
                    .fuse_active(params, &p0.levels[first..], &p1.levels[first..], active)?;
                trace.msf_calls += 1;
                let fused = self.msf.fuse_used(params, &merged)?;
                head(&fused, trace)
            }
            FusionPosition::PostMsf => {
                trace.backbone_images += 2 * n;
                let (p0, p1) = self.encoder.encode_pair(params, t0, t1)?;
                let m0 = msf(&p0.levels, trace)?;
                let m1 = msf(&p1.levels, trace)?;
                let merged = self.mtf.fuse_active(params, &[m0], &[m1], active)?;
                head(&merged[0], trace)
            }
            FusionPosition::PostHead => {
                trace.backbone_images += 2 * n;
                let (p0, p1) = self.encoder.encode_pair(params, t0, t1)?;
                let l0 = head(&msf(&p0.levels, trace)?, trace)?;
                let l1 = head(&msf(&p1.levels, trace)?, trace)?;
                let merged = self.mtf.fuse_active(params, &[l0], &[l1], active)?;
                Ok(merged.into_iter().next().expect("one level"))
            }
        }
    }
}

/// Parameters (and any extra named tensors) as checkpoint entries.
pub fn to_entries<E: Scalar>(params: &ParamStore<E>) -> Vec<Entry> {
    params
        .iter()
        .map(|(name, t)| Entry {
            name: name.to_string(),
            shape: t.shape(),
            data: t.to_f32_vec(),
        })
        .collect()
}

/// Overwrites `params` from checkpoint entries. Entries not named in the store
/// are ignored (e.g. optimizer state). A missing parameter is an error unless
/// its name starts with one of `optional_prefixes`, in which case it keeps its
/// fresh initialisation; the names left at initialisation are returned.
pub fn load_entries(params: &mut ParamStore, entries: &[Entry], optional_prefixes: &[&str]) -> Result<Vec<String>> {
    let by_name: std::collections::HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut kept = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        let shape: Shape = params.get(id).shape();
        match by_name.get(name.as_str()) {
            Some(e) if e.shape == shape => params.set(id, e.data.clone())?,
            Some(e) => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {} in the checkpoint but {shape} in the model",
                    e.shape
                )))
            }
            None if optional_prefixes.iter().any(|p| name.starts_with(p)) => kept.push(name),
            None => return Err(Error::Checkpoint(format!("checkpoint is missing parameter {name}"))),
        }
    }
    Ok(kept)
}
