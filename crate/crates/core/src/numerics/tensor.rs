use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Construction through [`Tensor::new`] validates that the buffer matches the
/// shape and that every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} values, buffer holds {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for op outputs whose shape is known to be right.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape_mismatch("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index. Panics if out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    /// Order-dependent checksum over the raw bit patterns.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the little-endian bytes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank does not match tensor rank");
    let mut flat = 0;
    for (&extent, &i) in shape.iter().zip(index) {
        assert!(i < extent, "index {index:?} out of range for shape {shape:?}");
        flat = flat * extent + i;
    }
    flat
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new([0, 3], vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new([2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new([2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn checksum_is_order_sensitive() {
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![2.0, 1.0]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }
}
