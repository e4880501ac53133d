//! Dense row-major tensors of 64-bit reals with explicit shape metadata.
//!
//! `Volume` carries voxel data, masks, feature maps and gradients. Rank
//! conventions: rank 3 is spatial `(i, j, k)`, rank 4 is batched
//! `(n, i, j, k)`, rank 5 is batched with a trailing feature axis
//! `(n, i, j, k, l)`. Storage is row-major with the last listed axis
//! fastest. Rank 0 (empty shape, one element) represents a scalar.
//!
//! All shape coercions are explicit: there is no broadcasting. Every
//! public operation validates that its result stays finite.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero extent in shape {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
    #[error("mask value {value} at flat index {index} is neither 0 nor 1")]
    NonBinary { value: f64, index: usize },
    #[error("invalid axis permutation {perm:?} for rank {rank}")]
    BadPermutation { perm: Vec<usize>, rank: usize },
}

/// Element-wise binary operations on identically shaped volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

/// Dense tensor of `f64` with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume, validating extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, VolumeError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(VolumeError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(VolumeError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite {
                context: "Volume::new",
                index,
            });
        }
        Ok(Volume { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Volume {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Volume {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    /// Rank-0 volume holding a single value.
    pub fn scalar(value: f64) -> Self {
        Volume {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The value of a rank-0 or single-element volume.
    pub fn as_scalar(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.rank());
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Element-wise combination of two identically shaped volumes.
    pub fn elementwise(&self, other: &Volume, op: ElemOp) -> Result<Volume, VolumeError> {
        if self.shape != other.shape {
            return Err(VolumeError::ShapeMismatch {
                op: match op {
                    ElemOp::Add => "add",
                    ElemOp::Sub => "sub",
                    ElemOp::Mul => "mul",
                },
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| match op {
                ElemOp::Add => a + b,
                ElemOp::Sub => a - b,
                ElemOp::Mul => a * b,
            })
            .collect();
        Self::checked(self.shape.clone(), data, "elementwise")
    }

    pub fn add(&self, other: &Volume) -> Result<Volume, VolumeError> {
        self.elementwise(other, ElemOp::Add)
    }

    pub fn sub(&self, other: &Volume) -> Result<Volume, VolumeError> {
        self.elementwise(other, ElemOp::Sub)
    }

    pub fn mul(&self, other: &Volume) -> Result<Volume, VolumeError> {
        self.elementwise(other, ElemOp::Mul)
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, factor: f64) -> Result<Volume, VolumeError> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Self::checked(self.shape.clone(), data, "scale")
    }

    /// Applies `f` to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume, VolumeError> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::checked(self.shape.clone(), data, "map")
    }

    /// Sums over the given axes, removing them from the shape. Summing all
    /// axes yields a rank-0 scalar.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Volume, VolumeError> {
        let rank = self.rank();
        for &axis in axes {
            if axis >= rank {
                return Err(VolumeError::AxisOutOfRange { axis, rank });
            }
        }
        let mut drop = vec![false; rank];
        for &axis in axes {
            drop[axis] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&drop)
            .filter(|(_, d)| !**d)
            .map(|(e, _)| *e)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len.max(1)];

        // Walk the input linearly, maintaining the output flat index
        // incrementally from a multi-index counter.
        let mut out_strides = vec![0usize; rank];
        {
            let mut s = 1;
            for axis in (0..rank).rev() {
                if !drop[axis] {
                    out_strides[axis] = s;
                    s *= self.shape[axis];
                }
            }
        }
        let mut index = vec![0usize; rank];
        let mut out_flat = 0usize;
        for &v in &self.data {
            out[out_flat] += v;
            for axis in (0..rank).rev() {
                index[axis] += 1;
                out_flat += out_strides[axis];
                if index[axis] < self.shape[axis] {
                    break;
                }
                out_flat -= out_strides[axis] * self.shape[axis];
                index[axis] = 0;
            }
        }
        Self::checked(out_shape, out, "reduce_sum")
    }

    /// Sum of all elements.
    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Square root of the sum of squares over the given axes.
    pub fn l2_norm(&self, axes: &[usize]) -> Result<Volume, VolumeError> {
        let squared = self.mul(self)?;
        let summed = squared.reduce_sum(axes)?;
        summed.map(f64::sqrt)
    }

    /// Reinterprets the data under a new shape of identical length.
    pub fn reshape(&self, shape: &[usize]) -> Result<Volume, VolumeError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(VolumeError::ZeroExtent {
                shape: shape.to_vec(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(VolumeError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Volume {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorders axes so output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Volume, VolumeError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(VolumeError::BadPermutation {
                perm: perm.to_vec(),
                rank,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        let mut out = vec![0.0; self.data.len()];
        let mut index = vec![0usize; rank];
        for (out_flat, slot) in out.iter_mut().enumerate() {
            let in_flat: usize = index
                .iter()
                .zip(perm)
                .map(|(i, &p)| i * in_strides[p])
                .sum();
            *slot = self.data[in_flat];
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
            let _ = out_flat;
        }
        Ok(Volume {
            shape: out_shape,
            data: out,
        })
    }

    fn checked(
        shape: Vec<usize>,
        data: Vec<f64>,
        context: &'static str,
    ) -> Result<Volume, VolumeError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { context, index });
        }
        Ok(Volume { shape, data })
    }
}

/// Binary mask stored as reals constrained to {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    inner: Volume,
}

impl BinaryMask {
    /// Validates that every element is exactly 0.0 or 1.0.
    pub fn from_volume(volume: Volume) -> Result<Self, VolumeError> {
        for (index, &v) in volume.data().iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(VolumeError::NonBinary { value: v, index });
            }
        }
        Ok(BinaryMask { inner: volume })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        BinaryMask {
            inner: Volume::zeros(shape),
        }
    }

    pub fn as_volume(&self) -> &Volume {
        &self.inner
    }

    pub fn into_volume(self) -> Volume {
        self.inner
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.shape()
    }

    /// Number of foreground (== 1.0) voxels.
    pub fn foreground_count(&self) -> usize {
        self.inner.data().iter().filter(|&&v| v == 1.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mul_matches_direct_arithmetic() {
        let a = Volume::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Volume::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Volume::new(vec![2, 2], vec![1.0, -2.5, 3.0, 0.25]).unwrap();
        let z = Volume::zeros(&[2, 2]);
        assert_eq!(x.add(&z).unwrap(), x);
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let a = Volume::zeros(&[2, 3]);
        let b = Volume::zeros(&[3, 2]);
        let err = a.mul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn reduce_sum_all_axes_counts_ones() {
        let v = Volume::ones(&[2, 2, 2]);
        let s = v.reduce_sum(&[0, 1, 2]).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.as_scalar(), Some(8.0));
        assert_eq!(Volume::zeros(&[2, 2, 2]).sum_all(), 0.0);
    }

    #[test]
    fn reduce_sum_last_axis() {
        let v = Volume::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = v.reduce_sum(&[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 7.0]);
    }

    #[test]
    fn reduce_sum_first_axis() {
        let v = Volume::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = v.reduce_sum(&[0]).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
    }

    #[test]
    fn reduce_sum_rejects_bad_axis() {
        let v = Volume::zeros(&[2, 2]);
        assert!(matches!(
            v.reduce_sum(&[2]),
            Err(VolumeError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn l2_norm_pythagorean() {
        let v = Volume::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(v.l2_norm(&[0]).unwrap().as_scalar(), Some(5.0));
        assert_eq!(Volume::zeros(&[4]).l2_norm(&[0]).unwrap().as_scalar(), Some(0.0));
        let u = Volume::ones(&[4]);
        assert_eq!(u.l2_norm(&[0]).unwrap().as_scalar(), Some(2.0));
    }

    #[test]
    fn new_rejects_non_finite_and_bad_lengths() {
        assert!(matches!(
            Volume::new(vec![2], vec![1.0, f64::NAN]),
            Err(VolumeError::NonFinite { .. })
        ));
        assert!(matches!(
            Volume::new(vec![2, 2], vec![0.0; 3]),
            Err(VolumeError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Volume::new(vec![0], vec![]),
            Err(VolumeError::ZeroExtent { .. })
        ));
    }

    #[test]
    fn mask_rejects_non_binary() {
        let v = Volume::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(matches!(
            BinaryMask::from_volume(v),
            Err(VolumeError::NonBinary { .. })
        ));
    }

    #[test]
    fn permute_roundtrip() {
        let v = Volume::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let t = v.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.get(&[2, 1]), v.get(&[1, 2]));
        assert_eq!(t.permute(&[1, 0]).unwrap(), v);
    }

    fn small_volume() -> impl Strategy<Value = Volume> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c)| {
            proptest::collection::vec(-10.0f64..10.0, a * b * c)
                .prop_map(move |data| Volume::new(vec![a, b, c], data).unwrap())
        })
    }

    fn volume_pair() -> impl Strategy<Value = (Volume, Volume)> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c)| {
            let len = a * b * c;
            (
                proptest::collection::vec(-10.0f64..10.0, len),
                proptest::collection::vec(-10.0f64..10.0, len),
            )
                .prop_map(move |(d1, d2)| {
                    (
                        Volume::new(vec![a, b, c], d1).unwrap(),
                        Volume::new(vec![a, b, c], d2).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn reduce_sum_matches_sequential_sum(v in small_volume()) {
            let all: Vec<usize> = (0..v.rank()).collect();
            let reduced = v.reduce_sum(&all).unwrap().as_scalar().unwrap();
            let seq: f64 = v.data().iter().sum();
            let denom = seq.abs().max(1.0);
            prop_assert!(((reduced - seq) / denom).abs() < 1e-12);
        }

        #[test]
        fn elementwise_commutes_with_permutation((v, w) in volume_pair()) {
            let perm = [2usize, 0, 1];
            let direct = v.mul(&w).unwrap().permute(&perm).unwrap();
            let permuted = v.permute(&perm).unwrap().mul(&w.permute(&perm).unwrap()).unwrap();
            prop_assert_eq!(direct, permuted);
        }

        #[test]
        fn l2_norm_absolutely_homogeneous(v in small_volume(), c in -4.0f64..4.0) {
            let all: Vec<usize> = (0..v.rank()).collect();
            let lhs = v.scale(c).unwrap().l2_norm(&all).unwrap().as_scalar().unwrap();
            let rhs = c.abs() * v.l2_norm(&all).unwrap().as_scalar().unwrap();
            let denom = rhs.abs().max(1e-12);
            prop_assert!(((lhs - rhs) / denom).abs() < 1e-12);
        }
    }
}
