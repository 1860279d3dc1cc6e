//! Dense NCHW tensor used by the reference interpreter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MofaError, Result};
use crate::rng::Rng;

/// Batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(MofaError::InvalidShape(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }

    pub fn with_channels(self, c: usize) -> Self {
        Dims4 { c, ..self }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Parses the `CxHxW` form used on the command line; batch is fixed at 1.
impl FromStr for Dims4 {
    type Err = MofaError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(MofaError::InvalidShape(format!("expected CxHxW, got `{s}`")));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| MofaError::InvalidShape(format!("bad dimension `{p}` in `{s}`")))?;
        }
        let d = Dims4::new(1, v[0], v[1], v[2]);
        d.check()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Dims4,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Dims4) -> Result<Self> {
        shape.check()?;
        Ok(Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        })
    }

    pub fn from_vec(shape: Dims4, data: Vec<f32>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.numel() {
            return Err(MofaError::InvalidShape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Values uniform in `[-1, 1)`, drawn in storage order.
    pub fn from_seed(shape: Dims4, seed: u64) -> Result<Self> {
        shape.check()?;
        let mut rng = Rng::new(seed);
        let data = (0..shape.numel()).map(|_| rng.next_signed_f32()).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Dims4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Channels `[lo, hi)`, copied bit for bit.
    pub fn channel_slice(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let s = self.shape;
        if lo >= hi || hi > s.c {
            return Err(MofaError::SliceError {
                lo,
                hi,
                channels: s.c,
            });
        }
        let plane = s.spatial();
        let mut data = Vec::with_capacity(s.n * (hi - lo) * plane);
        for n in 0..s.n {
            let start = self.index(n, lo, 0, 0);
            let end = start + (hi - lo) * plane;
            data.extend_from_slice(&self.data[start..end]);
        }
        Ok(Tensor {
            shape: s.with_channels(hi - lo),
            data,
        })
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(MofaError::mismatch(
                "concat",
                format!("cannot concatenate {sa} with {sb}"),
            ));
        }
        let plane = sa.spatial();
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..sa.n {
            data.extend_from_slice(&a.data[n * sa.c * plane..(n + 1) * sa.c * plane]);
            data.extend_from_slice(&b.data[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        Ok(Tensor {
            shape: sa.with_channels(sa.c + sb.c),
            data,
        })
    }

    /// Wrapping sum of the IEEE-754 bit patterns of every element.
    pub fn checksum(&self) -> u64 {
        self.data
            .iter()
            .fold(0u64, |acc, v| acc.wrapping_add(u64::from(v.to_bits())))
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seeded_tensor_is_deterministic() {
        let a = Tensor::from_seed(Dims4::new(1, 1, 1, 1), 7).unwrap();
        let b = Tensor::from_seed(Dims4::new(1, 1, 1, 1), 7).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.data().len(), 1);
    }

    #[test]
    fn seed_changes_values() {
        let a = Tensor::from_seed(Dims4::new(1, 3, 4, 4), 0).unwrap();
        let b = Tensor::from_seed(Dims4::new(1, 3, 4, 4), 1).unwrap();
        assert!(!a.bitwise_eq(&b));
    }

    #[test]
    fn seeded_length() {
        let t = Tensor::from_seed(Dims4::new(2, 8, 16, 16), 42).unwrap();
        assert_eq!(t.data().len(), 4096);
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(matches!(
            Tensor::from_seed(Dims4::new(1, 0, 4, 4), 0),
            Err(MofaError::InvalidShape(_))
        ));
    }

    #[test]
    fn slice_shapes() {
        let t = Tensor::from_seed(Dims4::new(1, 64, 4, 4), 3).unwrap();
        assert_eq!(t.channel_slice(0, 16).unwrap().shape(), Dims4::new(1, 16, 4, 4));
        assert!(t.channel_slice(0, 64).unwrap().bitwise_eq(&t));
        assert!(matches!(t.channel_slice(0, 65), Err(MofaError::SliceError { .. })));
        assert!(matches!(t.channel_slice(5, 5), Err(MofaError::SliceError { .. })));
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::from_seed(Dims4::new(1, 4, 8, 8), 0).unwrap();
        let b = Tensor::from_seed(Dims4::new(1, 12, 8, 8), 1).unwrap();
        assert_eq!(Tensor::concat_channels(&a, &b).unwrap().shape(), Dims4::new(1, 16, 8, 8));
        let c = Tensor::from_seed(Dims4::new(1, 12, 4, 8), 1).unwrap();
        assert!(matches!(
            Tensor::concat_channels(&a, &c),
            Err(MofaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn parse_chw() {
        assert_eq!("3x256x256".parse::<Dims4>().unwrap(), Dims4::new(1, 3, 256, 256));
        assert!(matches!("3x0x0".parse::<Dims4>(), Err(MofaError::InvalidShape(_))));
        assert!("3x256".parse::<Dims4>().is_err());
    }

    proptest! {
        #[test]
        fn slice_concat_round_trip(n in 1usize..3, c in 2usize..12, h in 1usize..6, w in 1usize..6, k_frac in 0.0f64..1.0, seed: u64) {
            let t = Tensor::from_seed(Dims4::new(n, c, h, w), seed).unwrap();
            let k = 1 + ((c - 1) as f64 * k_frac) as usize;
            let k = k.min(c - 1);
            let lo = t.channel_slice(0, k).unwrap();
            let hi = t.channel_slice(k, c).unwrap();
            prop_assert!(Tensor::concat_channels(&lo, &hi).unwrap().bitwise_eq(&t));
        }

        #[test]
        fn seeded_is_pure(c in 1usize..5, h in 1usize..5, seed: u64) {
            let s = Dims4::new(1, c, h, 3);
            prop_assert!(Tensor::from_seed(s, seed).unwrap().bitwise_eq(&Tensor::from_seed(s, seed).unwrap()));
        }
    }
}
