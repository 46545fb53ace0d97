//! Dense tensor storage, layer kernels, the autodiff tape and the Adam
//! optimizer.
//!
//! Tensors are plain row-major buffers of `f32` or `f64`. Training and
//! inference run in `f32`; gradient checking runs the same code in `f64`
//! because central finite differences are unreliable in single precision.

mod adam;
mod graph;
mod kernels;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Activation, Graph, Var};
pub use kernels::conv3d_output_extent;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Dtype code used by the NDT1 file format (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;

    fn of_f64(v: f64) -> Self {
        Self::from(v).unwrap()
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
    fn from_le_bytes(bytes: &[u8]) -> Self;
    fn write_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Dense row-major tensor of rank 1..=5.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a scalar (numel == 1) tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise cast between numeric modes.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of_f64(v.to_f64_lossy())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 5 {
        return Err(Error::InvalidShape(format!("rank must be 1..=5, got {:?}", shape)));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(format!("extents must be >= 1, got {:?}", shape)));
    }
    Ok(())
}

/// Fill a tensor with uniform values in [lo, hi) from the given RNG.
pub fn fill_uniform<S: Scalar, R: rand::Rng>(t: &mut Tensor<S>, rng: &mut R, lo: f64, hi: f64) {
    for v in t.data_mut() {
        *v = S::of_f64(rng.gen_range(lo..hi));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::<f32>::new(&[2, 0, 3], vec![]).is_err());
    }

    #[test]
    fn rejects_rank_6() {
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::new(&[2], vec![1.5, -2.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5, -2.25]);
    }
}
