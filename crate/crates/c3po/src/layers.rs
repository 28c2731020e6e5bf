use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{conv2d, relu, Conv2dSpec, Scalar, Shape, Tensor};

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// Registers `{name}.weight` (He-uniform) and, if `bias`, `{name}.bias` (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.insert_he_uniform(
            format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            rng,
        )?;
        let bias = if bias {
            Some(store.insert_zeros(format!("{name}.bias"), Shape::new(1, out_channels, 1, 1))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        })
    }

    /// 3×3, padding 1.
    pub fn same3(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 3, Conv2dSpec::new(1, 1), bias, rng)
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, Conv2dSpec::default(), true, rng)
    }

    pub fn forward<E: Scalar>(&self, params: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.forward_with(params, x, self.spec)
    }

    /// Same weights under a different geometry (used for clipped atrous rates).
    pub fn forward_with<E: Scalar>(&self, params: &ParamStore<E>, x: &Tensor<E>, spec: Conv2dSpec) -> Result<Tensor<E>> {
        conv2d(x, params.get(self.weight), self.bias.map(|b| params.get(b)), spec)
    }

    pub fn forward_relu<E: Scalar>(&self, params: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(relu(&self.forward(params, x)?))
    }
}
