//! Temporal fusion of two feature pyramids.
//!
//! Each level combines `f0` and `f1` through up to four branch kinds:
//!
//! * appear    — `conv_change(relu(f1 − f0))`
//! * disappear — `conv_change(relu(f0 − f1))`
//! * exchange  — `conv_exchange(max(f0, f1) − min(f0, f1))`
//! * info      — `conv_info(f0) + conv_info(f1)`
//!
//! and sums the enabled contributions in the fixed order
//! `((appear + disappear) + exchange) + info`. Float addition is commutative,
//! so with shared change and info convs swapping the inputs only swaps the
//! operands of commutative additions and the output is bit-identical.
//!
//! Exchange is the sum of the appear and disappear activations:
//! `relu(a − b) + relu(b − a) = max(a, b) − min(a, b) = |a − b|`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::tensor::{add, max, min, relu, sub, Scalar, Tensor};

/// One MTF branch kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Info,
    Appear,
    Disappear,
    Exchange,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Info, Branch::Appear, Branch::Disappear, Branch::Exchange];

    /// The single-letter tag used in branch strings.
    pub fn letter(self) -> char {
        match self {
            Branch::Info => 'I',
            Branch::Appear => 'A',
            Branch::Disappear => 'D',
            Branch::Exchange => 'E',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Info => "info",
            Branch::Appear => "appear",
            Branch::Disappear => "disappear",
            Branch::Exchange => "exchange",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s || s.len() == 1 && s.starts_with(b.letter()))
            .ok_or_else(|| Error::Config(format!("unknown branch {s:?} (expected info, appear, disappear or exchange)")))
    }
}

/// A non-empty subset of branches, written like `"I+A+D+E"` or `"I+D"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BranchSet {
    pub info: bool,
    pub appear: bool,
    pub disappear: bool,
    pub exchange: bool,
}

impl BranchSet {
    pub const ALL: BranchSet = BranchSet {
        info: true,
        appear: true,
        disappear: true,
        exchange: true,
    };

    pub fn only(branch: Branch) -> Self {
        let mut s = BranchSet {
            info: false,
            appear: false,
            disappear: false,
            exchange: false,
        };
        s.set(branch, true);
        s
    }

    pub fn contains(&self, branch: Branch) -> bool {
        match branch {
            Branch::Info => self.info,
            Branch::Appear => self.appear,
            Branch::Disappear => self.disappear,
            Branch::Exchange => self.exchange,
        }
    }

    pub fn set(&mut self, branch: Branch, on: bool) {
        match branch {
            Branch::Info => self.info = on,
            Branch::Appear => self.appear = on,
            Branch::Disappear => self.disappear = on,
            Branch::Exchange => self.exchange = on,
        }
    }

    pub fn with(mut self, branch: Branch) -> Self {
        self.set(branch, true);
        self
    }

    pub fn is_empty(&self) -> bool {
        !(self.info || self.appear || self.disappear || self.exchange)
    }

    pub fn is_subset_of(&self, other: &BranchSet) -> bool {
        Branch::ALL.iter().all(|&b| !self.contains(b) || other.contains(b))
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        Branch::ALL.into_iter().filter(|&b| self.contains(b))
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet::ALL
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<String> = self.iter().map(|b| b.letter().to_string()).collect();
        f.write_str(&tags.join("+"))
    }
}

impl FromStr for BranchSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = BranchSet {
            info: false,
            appear: false,
            disappear: false,
            exchange: false,
        };
        for tag in s.split('+').map(str::trim).filter(|t| !t.is_empty()) {
            let b: Branch = tag
                .parse()
                .map_err(|_| Error::Config(format!("unknown branch tag {tag:?} in {s:?} (use I, A, D, E)")))?;
            set.set(b, true);
        }
        if set.is_empty() {
            return Err(Error::Config(format!("branch set {s:?} is empty")));
        }
        Ok(set)
    }
}

impl TryFrom<String> for BranchSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BranchSet> for String {
    fn from(b: BranchSet) -> String {
        b.to_string()
    }
}

/// Which branches exist and which convs they share.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub branches: BranchSet,
    /// Appear and disappear share one conv.
    pub share_change_conv: bool,
    /// Both info paths share one conv.
    pub share_info_conv: bool,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            branches: BranchSet::ALL,
            share_change_conv: true,
            share_info_conv: true,
        }
    }
}

#[derive(Clone, Debug)]
struct MtfLevel {
    /// The appear conv, which is also the disappear conv when shared.
    appear: Option<Conv>,
    disappear: Option<Conv>,
    exchange: Option<Conv>,
    info_t0: Option<Conv>,
    /// `None` with a present `info_t0` means the info conv is shared.
    info_t1: Option<Conv>,
}

/// Per-level MTF parameters (`mtf.level{k}.*`).
#[derive(Clone, Debug)]
pub struct Mtf {
    pub config: BranchConfig,
    channels: Vec<usize>,
    levels: Vec<MtfLevel>,
}

impl Mtf {
    /// Builds one set of C→C convs per level; `channels[k]` is level `k`'s width.
    pub fn new(
        channels: &[usize],
        config: BranchConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new_at(0, channels, config, store, rng)
    }

    /// Like [`new`](Self::new) for levels starting at pyramid index
    /// `first_level`, which only affects parameter names
    /// (`mtf.level{first_level + k}.*`).
    pub fn new_at(
        first_level: usize,
        channels: &[usize],
        config: BranchConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.branches.is_empty() {
            return Err(Error::Config("MTF needs at least one branch".into()));
        }
        let b = config.branches;
        let mut levels = Vec::with_capacity(channels.len());
        for (k, &c) in channels.iter().enumerate() {
            let name = |suffix: &str| format!("mtf.level{}.{suffix}", first_level + k);
            let mut conv = |suffix: &str, bias: bool| Conv::same3(store, &name(suffix), c, c, bias, rng);
            let (appear, disappear) = match (b.appear, b.disappear, config.share_change_conv) {
                (false, false, _) => (None, None),
                (true, true, true) => (Some(conv("change", false)?), None),
                (a, d, true) => {
                    let shared = conv("change", false)?;
                    if a {
                        (Some(shared), None)
                    } else {
                        debug_assert!(d);
                        (None, Some(shared))
                    }
                }
                (a, d, false) => (
                    a.then(|| conv("appear", false)).transpose()?,
                    d.then(|| conv("disappear", false)).transpose()?,
                ),
            };
            let exchange = b.exchange.then(|| conv("exchange", false)).transpose()?;
            let (info_t0, info_t1) = match (b.info, config.share_info_conv) {
                (false, _) => (None, None),
                (true, true) => (Some(conv("info", true)?), None),
                (true, false) => (Some(conv("info_t0", true)?), Some(conv("info_t1", true)?)),
            };
            levels.push(MtfLevel {
                appear,
                disappear,
                exchange,
                info_t0,
                info_t1,
            });
        }
        Ok(Mtf {
            config,
            channels: channels.to_vec(),
            levels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    fn check_inputs<E: Scalar>(&self, f0: &[Tensor<E>], f1: &[Tensor<E>]) -> Result<()> {
        if f0.len() != self.levels.len() || f1.len() != self.levels.len() {
            return Err(Error::invalid(format!(
                "MTF built for {} levels, got pyramids with {} and {}",
                self.levels.len(),
                f0.len(),
                f1.len()
            )));
        }
        for (k, (a, b)) in f0.iter().zip(f1).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mtf_fuse",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            if a.shape().c() != self.channels[k] {
                return Err(Error::invalid(format!(
                    "MTF level {k} expects {} channels, got {}",
                    self.channels[k],
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    /// The input a branch's conv sees, before the conv.
    pub fn pre_activation<E: Scalar>(branch: Branch, f0: &Tensor<E>, f1: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        Ok(match branch {
            Branch::Appear => vec![relu(&sub(f1, f0)?)],
            Branch::Disappear => vec![relu(&sub(f0, f1)?)],
            Branch::Exchange => vec![sub(&max(f0, f1)?, &min(f0, f1)?)?],
            Branch::Info => vec![f0.clone(), f1.clone()],
        })
    }

    fn branch_level<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        level: &MtfLevel,
        branch: Branch,
        f0: &Tensor<E>,
        f1: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let disabled = || Error::invalid(format!("branch {branch} is not enabled in {}", self.config.branches));
        if !self.config.branches.contains(branch) {
            return Err(disabled());
        }
        let pre = Self::pre_activation(branch, f0, f1)?;
        match branch {
            Branch::Appear => level.appear.as_ref().ok_or_else(disabled)?.forward(params, &pre[0]),
            Branch::Disappear => level
                .disappear
                .as_ref()
                .or(level.appear.as_ref().filter(|_| self.config.share_change_conv))
                .ok_or_else(disabled)?
                .forward(params, &pre[0]),
            Branch::Exchange => level.exchange.as_ref().ok_or_else(disabled)?.forward(params, &pre[0]),
            Branch::Info => {
                let c0 = level.info_t0.as_ref().ok_or_else(disabled)?;
                let c1 = level.info_t1.as_ref().unwrap_or(c0);
                add(&c0.forward(params, &pre[0])?, &c1.forward(params, &pre[1])?)
            }
        }
    }

    /// One branch's post-conv contribution at every level.
    pub fn branch_activation<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        f0: &[Tensor<E>],
        f1: &[Tensor<E>],
        branch: Branch,
    ) -> Result<Vec<Tensor<E>>> {
        self.check_inputs(f0, f1)?;
        self.levels
            .iter()
            .zip(f0.iter().zip(f1))
            .map(|(level, (a, b))| self.branch_level(params, level, branch, a, b))
            .collect()
    }

    /// Fuses with every configured branch.
    pub fn fuse<E: Scalar>(&self, params: &ParamStore<E>, f0: &[Tensor<E>], f1: &[Tensor<E>]) -> Result<Vec<Tensor<E>>> {
        self.fuse_active(params, f0, f1, self.config.branches)
    }

    /// Fuses with only the branches in `active`, which must be a subset of
    /// the configured ones. Used for per-branch inspection of a trained model.
    pub fn fuse_active<E: Scalar>(
        &self,
        params: &ParamStore<E>,
        f0: &[Tensor<E>],
        f1: &[Tensor<E>],
        active: BranchSet,
    ) -> Result<Vec<Tensor<E>>> {
        if active.is_empty() || !active.is_subset_of(&self.config.branches) {
            return Err(Error::invalid(format!(
                "active branches {active} must be a non-empty subset of {}",
                self.config.branches
            )));
        }
        self.check_inputs(f0, f1)?;
        let order = [Branch::Appear, Branch::Disappear, Branch::Exchange, Branch::Info];
        let mut out = Vec::with_capacity(self.levels.len());
        for (level, (a, b)) in self.levels.iter().zip(f0.iter().zip(f1)) {
            let mut acc: Option<Tensor<E>> = None;
            for branch in order.into_iter().filter(|&br| active.contains(br)) {
                let y = self.branch_level(params, level, branch, a, b)?;
                acc = Some(match acc {
                    None => y,
                    Some(s) => add(&s, &y)?,
                });
            }
            out.push(acc.expect("active set is non-empty"));
        }
        Ok(out)
    }
}
