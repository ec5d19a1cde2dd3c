use std::fmt;

use serde::{Deserialize, Serialize};
use stylefat_autograd::{Scalar, Tensor};

use crate::error::{ensure, Result};

/// Image domain: photo-faces (`X`) or anime-faces (`Y`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    #[serde(rename = "photo")]
    Photo,
    #[serde(rename = "anime")]
    Anime,
}

impl DomainTag {
    pub const ALL: [DomainTag; 2] = [DomainTag::Photo, DomainTag::Anime];

    pub fn other(self) -> DomainTag {
        match self {
            DomainTag::Photo => DomainTag::Anime,
            DomainTag::Anime => DomainTag::Photo,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Photo => "photo",
            DomainTag::Anime => "anime",
        })
    }
}

/// Batch of RGB images `[N, 3, S, S]` with values in `[-1, 1]`, where `S` is
/// a power of two no smaller than 16.
#[derive(Clone, Debug)]
pub struct ImageBatch<T: Scalar>(Tensor<T>);

impl<T: Scalar> ImageBatch<T> {
    /// Validates shape and range; values outside `[-1, 1]` are rejected.
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        Self::check_shape(tensor.shape())?;
        ensure!(
            tensor
                .data()
                .iter()
                .all(|v| v.is_finite() && v.abs() <= T::one()),
            InvalidInput,
            "image values must be finite and within [-1, 1]"
        );
        Ok(ImageBatch(tensor))
    }

    /// Validates the shape and clamps values into `[-1, 1]`.
    pub fn clamped(tensor: Tensor<T>) -> Result<Self> {
        Self::check_shape(tensor.shape())?;
        ensure!(tensor.all_finite(), InvalidInput, "image values must be finite");
        let one = T::one();
        let data = tensor.data().iter().map(|v| v.max(-one).min(one)).collect();
        Ok(ImageBatch(Tensor::from_vec(data, tensor.shape())))
    }

    /// Wraps a network output that is in range by construction (e.g. `tanh`),
    /// keeping its autodiff history.
    pub(crate) fn from_network(tensor: Tensor<T>) -> Self {
        debug_assert!(Self::check_shape(tensor.shape()).is_ok());
        ImageBatch(tensor)
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        ensure!(
            shape.len() == 4 && shape[0] >= 1 && shape[1] == 3,
            Shape,
            "image batch must be [N, 3, H, W], got {shape:?}"
        );
        ensure!(
            shape[2] == shape[3] && shape[2] >= 16 && shape[2].is_power_of_two(),
            Shape,
            "image side must be square, a power of two and >= 16, got {}x{}",
            shape[2],
            shape[3]
        );
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn detach(&self) -> Self {
        ImageBatch(self.0.detach())
    }

    /// Single image `i` as a batch of one.
    pub fn get(&self, i: usize) -> ImageBatch<T> {
        ImageBatch(self.0.narrow(0, i, 1))
    }

    /// Concatenates batches of equal resolution.
    pub fn stack(parts: &[ImageBatch<T>]) -> Result<Self> {
        ensure!(!parts.is_empty(), Contract, "cannot stack zero batches");
        let size = parts[0].size();
        ensure!(
            parts.iter().all(|p| p.size() == size),
            Shape,
            "cannot stack batches of different resolutions"
        );
        let tensors: Vec<Tensor<T>> = parts.iter().map(|p| p.0.clone()).collect();
        Ok(ImageBatch(Tensor::concat(&tensors, 0)))
    }

    /// Converts element type (drops history).
    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        let data = self
            .0
            .data()
            .iter()
            .map(|v| U::from_f64_lossy(v.as_f64()))
            .collect();
        ImageBatch(Tensor::from_vec(data, self.0.shape()))
    }
}

/// One photo batch `x` and one anime batch `y`, drawn independently.
#[derive(Clone, Debug)]
pub struct UnpairedBatch<T: Scalar> {
    pub x: ImageBatch<T>,
    pub y: ImageBatch<T>,
}

impl<T: Scalar> UnpairedBatch<T> {
    pub fn new(x: ImageBatch<T>, y: ImageBatch<T>) -> Result<Self> {
        ensure!(
            x.size() == y.size(),
            Shape,
            "photo and anime batches differ in resolution: {} vs {}",
            x.size(),
            y.size()
        );
        Ok(UnpairedBatch { x, y })
    }

    pub fn get(&self, domain: DomainTag) -> &ImageBatch<T> {
        match domain {
            DomainTag::Photo => &self.x,
            DomainTag::Anime => &self.y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_shape_and_range() {
        assert!(ImageBatch::new(Tensor::<f32>::zeros(&[2, 3, 16, 16])).is_ok());
        assert!(ImageBatch::new(Tensor::<f32>::zeros(&[2, 3, 24, 24])).is_err());
        assert!(ImageBatch::new(Tensor::<f32>::zeros(&[2, 1, 16, 16])).is_err());
        assert!(ImageBatch::new(Tensor::<f32>::full(&[1, 3, 16, 16], 1.5)).is_err());
        let c = ImageBatch::clamped(Tensor::<f32>::full(&[1, 3, 16, 16], 1.5)).unwrap();
        assert!(c.tensor().data().iter().all(|&v| v == 1.0));
    }
}
