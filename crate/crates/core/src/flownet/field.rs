use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel displacements `(dx, dy)` in pixels, stored as `[H, W, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        match tensor.shape() {
            [_, _, 2] => {
                tensor.ensure_finite("flow field")?;
                Ok(FlowField { tensor })
            }
            s => Err(Error::shape("flow field", format!("[H, W, 2] expected, got {s:?}"))),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            tensor: Tensor::zeros([height, width, 2]),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        FlowField {
            tensor: Tensor::new([height, width, 2], data).expect("length matches"),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        let i = 2 * (y * self.width() + x);
        (self.tensor.data()[i], self.tensor.data()[i + 1])
    }

    /// Interleaved `dx, dy` values, row-major.
    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn vectors(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.tensor.data().chunks(2).map(|p| (p[0], p[1]))
    }

    /// Largest vector length in the field.
    pub fn max_norm(&self) -> T {
        self.vectors()
            .map(|(dx, dy)| dx.hypot(dy))
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            tensor: self.tensor.cast(),
        }
    }
}

/// Per-pixel validity flags for a flow field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ValidMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "valid mask",
                format!("{height}x{width} needs {} flags, got {}", height * width, bits.len()),
            ));
        }
        Ok(ValidMask { height, width, bits })
    }

    pub fn all(height: usize, width: usize) -> Self {
        ValidMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub(crate) fn check_matches<T: Scalar>(&self, flow: &FlowField<T>, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (flow.height(), flow.width()) {
            return Err(Error::shape(
                op,
                format!(
                    "mask {}x{} vs flow {}x{}",
                    self.height,
                    self.width,
                    flow.height(),
                    flow.width()
                ),
            ));
        }
        Ok(())
    }
}
