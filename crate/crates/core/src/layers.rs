//! Convolution and linear layers backed by a [`ParamStore`].

use rand::Rng;
use stylefat_autograd::{ConvGeometry, Scalar, Tensor};

use crate::params::{he_normal, Constraint, ParamId, ParamStore};

/// Negative slope of every leaky rectifier in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn act<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.leaky_relu(LEAKY_SLOPE)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// "Same"-style convolution for odd kernels (`padding = k / 2`) or the
    /// usual stride-2 halving layout for `k = 4, stride = 2, padding = 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = he_normal(rng, &[out_channels, in_channels, kernel, kernel], fan_in, LEAKY_SLOPE);
        let weight = store.add(format!("{name}.weight"), w, Constraint::Free);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                Constraint::Free,
            )
        });
        Conv2d {
            weight,
            bias,
            geom: ConvGeometry::new(stride, padding),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = x.conv2d(params.get(self.weight), self.geom);
        match self.bias {
            Some(b) => y.add(&params.get(b).reshape(&[1, self.out_channels, 1, 1])),
            None => y,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Dense layer `y = x @ W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        weight_std: f64,
        bias_init: impl Fn(usize) -> f64,
    ) -> Self {
        let w = crate::params::normal(rng, &[in_features, out_features], weight_std);
        let weight = store.add(format!("{name}.weight"), w, Constraint::Free);
        let b: Vec<f64> = (0..out_features).map(bias_init).collect();
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::from_f64(&b, &[out_features]),
            Constraint::Free,
        );
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(params.get(self.weight)).add(params.get(self.bias))
    }
}

/// Global average pooling `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    x.mean_axes_keepdim(&[2, 3]).reshape(&[n, c])
}
