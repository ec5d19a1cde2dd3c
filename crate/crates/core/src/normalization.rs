//! Feature statistics and the style-conditioned normalization functions.
//!
//! PoLIN mixes the instance-normalized and layer-normalized views of a
//! feature map with a learned 1x1 convolution across *all* channels.
//! AdaPoLIN does the same with a bias-free convolution followed by a
//! style-supplied per-channel affine transform. IN, LN, LIN, AdaIN and AdaLIN
//! are provided as ablation baselines.

use stylefat_autograd::{ConvGeometry, Scalar, Tensor};

use crate::error::{ensure, Result};

/// Stabilizer added to the variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Mean and epsilon-stabilized standard deviation, kept broadcastable
/// against the source map: `[N, C, 1, 1]` for instance statistics and
/// `[N, 1, 1, 1]` for layer statistics.
#[derive(Clone, Debug)]
pub struct NormStats<T: Scalar> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Weights of the 1x1 channel-mixing convolution over `[IN(z), LN(z)]`.
///
/// `weight` is `[C_out, 2 * C_in]`: columns `0..C_in` read the
/// instance-normalized channels, columns `C_in..2*C_in` the layer-normalized
/// ones.
#[derive(Clone, Debug)]
pub struct MixWeights<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> MixWeights<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        ensure!(
            weight.ndim() == 2 && weight.shape()[1] % 2 == 0 && weight.shape()[1] > 0,
            Shape,
            "mix weight must be [C_out, 2*C_in], got {:?}",
            weight.shape()
        );
        if let Some(b) = &bias {
            ensure!(
                b.shape() == [weight.shape()[0]],
                Shape,
                "mix bias must be [{}], got {:?}",
                weight.shape()[0],
                b.shape()
            );
        }
        Ok(MixWeights { weight, bias })
    }

    /// Mixing that reproduces `IN(z)` exactly: identity on the first half,
    /// zero on the second, zero bias. Used as the initial value.
    pub fn instance_selection(channels: usize) -> Self {
        let mut w = vec![T::zero(); channels * 2 * channels];
        for c in 0..channels {
            w[c * 2 * channels + c] = T::one();
        }
        MixWeights {
            weight: Tensor::from_vec(w, &[channels, 2 * channels]),
            bias: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] / 2
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-channel style scale and shift, stored as `[N, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct AffineStyle<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> AffineStyle<T> {
    /// Accepts `[N, C]` or `[N, C, 1, 1]` gamma/beta of identical shape.
    pub fn new(gamma: Tensor<T>, beta: Tensor<T>) -> Result<Self> {
        ensure!(
            gamma.shape() == beta.shape(),
            Shape,
            "gamma {:?} and beta {:?} differ",
            gamma.shape(),
            beta.shape()
        );
        let s = gamma.shape().to_vec();
        let (gamma, beta) = match s.as_slice() {
            [n, c] => (gamma.reshape(&[*n, *c, 1, 1]), beta.reshape(&[*n, *c, 1, 1])),
            [_, _, 1, 1] => (gamma, beta),
            _ => {
                return Err(crate::Error::Shape(format!(
                    "style affine must be [N, C] or [N, C, 1, 1], got {s:?}"
                )))
            }
        };
        Ok(AffineStyle { gamma, beta })
    }

    /// `gamma = 1`, `beta = 0`.
    pub fn identity(batch: usize, channels: usize) -> Self {
        AffineStyle {
            gamma: Tensor::ones(&[batch, channels, 1, 1]),
            beta: Tensor::zeros(&[batch, channels, 1, 1]),
        }
    }

    pub fn batch(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[1]
    }

    pub(crate) fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        x.mul(&self.gamma).add(&self.beta)
    }
}

/// Normalization variants available at a plain or style-injected site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    In,
    Ln,
    Lin,
    AdaIn,
    AdaLin,
}

pub(crate) fn check_feature_map<T: Scalar>(z: &Tensor<T>) -> Result<()> {
    ensure!(
        z.ndim() == 4 && z.shape().iter().all(|&d| d >= 1),
        Shape,
        "feature map must be [N, C, H, W] with positive extents, got {:?}",
        z.shape()
    );
    ensure!(z.all_finite(), InvalidInput, "feature map contains non-finite values");
    Ok(())
}

pub(crate) fn stats_over<T: Scalar>(z: &Tensor<T>, axes: &[usize]) -> NormStats<T> {
    let mu = z.mean_axes_keepdim(axes);
    let var = z.sub(&mu).square().mean_axes_keepdim(axes);
    let sigma = var.add_scalar(NORM_EPS).sqrt();
    NormStats { mu, sigma }
}

pub(crate) fn normalize_over<T: Scalar>(z: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let NormStats { mu, sigma } = stats_over(z, axes);
    z.sub(&mu).div(&sigma)
}

pub(crate) fn in_unchecked<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    normalize_over(z, &[2, 3])
}

pub(crate) fn ln_unchecked<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    normalize_over(z, &[1, 2, 3])
}

/// `Conv1x1([IN(z), LN(z)])` without validation; `weight` is `[C_out, 2C]`.
pub(crate) fn polin_unchecked<T: Scalar>(
    z: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let both = Tensor::concat(&[in_unchecked(z), ln_unchecked(z)], 1);
    let c_out = weight.shape()[0];
    let w = weight.reshape(&[c_out, weight.shape()[1], 1, 1]);
    let mixed = both.conv2d(&w, ConvGeometry::new(1, 0));
    match bias {
        Some(b) => mixed.add(&b.reshape(&[1, c_out, 1, 1])),
        None => mixed,
    }
}

/// Per-channel blend `rho * IN(z) + (1 - rho) * LN(z)`; `rho` is `[C]`.
pub(crate) fn lin_unchecked<T: Scalar>(z: &Tensor<T>, rho: &Tensor<T>) -> Tensor<T> {
    let c = rho.numel();
    let r = rho.reshape(&[1, c, 1, 1]);
    let inst = in_unchecked(z);
    let layer = ln_unchecked(z);
    // rho*IN + (1-rho)*LN == LN + rho*(IN - LN)
    layer.add(&r.mul(&inst.sub(&layer)))
}

/// Channel-wise statistics: `mu[n,c]` and `sigma[n,c]` over `(H, W)`.
pub fn instance_stats<T: Scalar>(z: &Tensor<T>) -> Result<NormStats<T>> {
    check_feature_map(z)?;
    Ok(stats_over(z, &[2, 3]))
}

/// Layer-wise statistics: `mu[n]` and `sigma[n]` over `(C, H, W)`.
pub fn layer_stats<T: Scalar>(z: &Tensor<T>) -> Result<NormStats<T>> {
    check_feature_map(z)?;
    Ok(stats_over(z, &[1, 2, 3]))
}

/// Point-wise layer-instance normalization.
pub fn polin<T: Scalar>(z: &Tensor<T>, w: &MixWeights<T>) -> Result<Tensor<T>> {
    check_feature_map(z)?;
    ensure!(
        w.in_channels() == z.shape()[1],
        Shape,
        "mix weights expect {} input channels, feature map has {}",
        w.in_channels(),
        z.shape()[1]
    );
    Ok(polin_unchecked(z, &w.weight, w.bias.as_ref()))
}

/// Adaptive point-wise layer-instance normalization:
/// `gamma * Conv1x1([IN(z), LN(z)]) + beta` with a bias-free convolution.
pub fn adapolin<T: Scalar>(
    z: &Tensor<T>,
    w: &MixWeights<T>,
    style: &AffineStyle<T>,
) -> Result<Tensor<T>> {
    check_feature_map(z)?;
    if let Some(b) = &w.bias {
        ensure!(
            b.data().iter().all(|v| *v == T::zero()),
            Contract,
            "AdaPoLIN requires a zero convolution bias"
        );
    }
    ensure!(
        w.in_channels() == z.shape()[1],
        Shape,
        "mix weights expect {} input channels, feature map has {}",
        w.in_channels(),
        z.shape()[1]
    );
    check_style(style, z.shape()[0], w.out_channels())?;
    Ok(style.apply(&polin_unchecked(z, &w.weight, None)))
}

fn check_style<T: Scalar>(style: &AffineStyle<T>, batch: usize, channels: usize) -> Result<()> {
    ensure!(
        style.channels() == channels && (style.batch() == batch || style.batch() == 1),
        Shape,
        "style affine {:?} does not match batch {batch} x {channels} channels",
        style.gamma.shape()
    );
    Ok(())
}

/// Ablation baselines: IN, LN, LIN, AdaIN and AdaLIN.
///
/// `rho` (`[C]`, values in `[0, 1]`) is required for LIN/AdaLIN and `style`
/// for AdaIN/AdaLIN.
pub fn baseline_norm<T: Scalar>(
    z: &Tensor<T>,
    mode: BaselineMode,
    style: Option<&AffineStyle<T>>,
    rho: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_feature_map(z)?;
    let channels = z.shape()[1];
    let needs_rho = matches!(mode, BaselineMode::Lin | BaselineMode::AdaLin);
    let needs_style = matches!(mode, BaselineMode::AdaIn | BaselineMode::AdaLin);
    let rho = if needs_rho {
        let rho = rho.ok_or_else(|| crate::Error::Contract(format!("{mode:?} requires rho")))?;
        ensure!(
            rho.shape() == [channels],
            Shape,
            "rho must be [{channels}], got {:?}",
            rho.shape()
        );
        ensure!(
            rho.data().iter().all(|r| *r >= T::zero() && *r <= T::one()),
            InvalidInput,
            "rho must lie in [0, 1]"
        );
        Some(rho)
    } else {
        None
    };
    let style = if needs_style {
        let s = style.ok_or_else(|| crate::Error::Contract(format!("{mode:?} requires style")))?;
        check_style(s, z.shape()[0], channels)?;
        Some(s)
    } else {
        None
    };
    let out = match mode {
        BaselineMode::In | BaselineMode::AdaIn => in_unchecked(z),
        BaselineMode::Ln => ln_unchecked(z),
        BaselineMode::Lin | BaselineMode::AdaLin => lin_unchecked(z, rho.expect("checked")),
    };
    Ok(match style {
        Some(s) => s.apply(&out),
        None => out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape)
    }

    #[test]
    fn constant_field_has_eps_sigma() {
        let z = Tensor::<f64>::full(&[1, 2, 2, 2], 3.0);
        let s = instance_stats(&z).unwrap();
        assert!(s.mu.data().iter().all(|&m| (m - 3.0).abs() < 1e-12));
        assert!(s.sigma.data().iter().all(|&v| (v - NORM_EPS.sqrt()).abs() < 1e-12));
        let z = Tensor::<f64>::full(&[1, 2, 2, 2], -1.0);
        let s = layer_stats(&z).unwrap();
        assert_eq!(s.mu.shape(), &[1, 1, 1, 1]);
        assert!((s.mu.item() + 1.0).abs() < 1e-12);
        assert!((s.sigma.item() - NORM_EPS.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_point_channel() {
        let z = t(&[1.0, 3.0, 1.0, 3.0], &[1, 1, 2, 2]);
        let s = instance_stats(&z).unwrap();
        assert!((s.mu.item() - 2.0).abs() < 1e-12);
        assert!((s.sigma.item() - (1.0 + NORM_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn layer_mean_of_symmetric_channels() {
        let z = t(&[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0], &[1, 2, 2, 2]);
        assert!((layer_stats(&z).unwrap().mu.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_bad_rank() {
        let z = t(&[1.0, f64::NAN], &[1, 1, 1, 2]);
        assert!(matches!(instance_stats(&z), Err(crate::Error::InvalidInput(_))));
        let z = t(&[1.0, 2.0], &[1, 2]);
        assert!(matches!(layer_stats(&z), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn polin_channel_mismatch_is_shape_error() {
        let z = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let w = MixWeights::instance_selection(2);
        assert!(matches!(polin(&z, &w), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn adapolin_rejects_nonzero_bias() {
        let z = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let mut w = MixWeights::instance_selection(2);
        w.bias = Some(t(&[0.0, 0.1], &[2]));
        let style = AffineStyle::identity(1, 2);
        assert!(matches!(adapolin(&z, &w, &style), Err(crate::Error::Contract(_))));
        w.bias = Some(t(&[0.0, 0.0], &[2]));
        assert!(adapolin(&z, &w, &style).is_ok());
    }

    #[test]
    fn baseline_requires_parameters() {
        let z = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        assert!(matches!(
            baseline_norm(&z, BaselineMode::Lin, None, None),
            Err(crate::Error::Contract(_))
        ));
        assert!(matches!(
            baseline_norm(&z, BaselineMode::AdaIn, None, None),
            Err(crate::Error::Contract(_))
        ));
        let rho = t(&[0.5, 1.5], &[2]);
        assert!(matches!(
            baseline_norm(&z, BaselineMode::Lin, None, Some(&rho)),
            Err(crate::Error::InvalidInput(_))
        ));
    }

    #[test]
    fn instance_selection_initialisation_is_in() {
        let z = t(&[0.5, -1.0, 2.0, 0.0, 1.0, 1.5, -0.5, 3.0], &[1, 2, 2, 2]);
        let out = polin(&z, &MixWeights::instance_selection(2)).unwrap();
        let inst = baseline_norm(&z, BaselineMode::In, None, None).unwrap();
        assert!(out.max_abs_diff(&inst) < 1e-12);
    }
}
