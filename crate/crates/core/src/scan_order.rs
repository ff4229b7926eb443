//! Grid-to-sequence orders.
//!
//! Raster visits rows left to right. Zigzag reverses every other row so that
//! consecutive positions are always 4-neighbours.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanPattern {
    Raster,
    Zigzag,
}

impl ScanPattern {
    pub fn name(self) -> &'static str {
        match self {
            Self::Raster => "raster",
            Self::Zigzag => "zigzag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pattern: ScanPattern,
    h: usize,
    w: usize,
    /// Sequence position to flat cell index.
    perm: Arc<[usize]>,
    /// Flat cell index to sequence position.
    inv: Arc<[usize]>,
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("scan order needs non-zero dims, got {h}x{w}")));
    }
    Ok(())
}

impl ScanOrder {
    fn from_perm(pattern: ScanPattern, h: usize, w: usize, perm: Vec<usize>) -> Self {
        let mut inv = vec![0; perm.len()];
        for (t, &cell) in perm.iter().enumerate() {
            inv[cell] = t;
        }
        Self {
            pattern,
            h,
            w,
            perm: perm.into(),
            inv: inv.into(),
        }
    }

    pub fn raster(h: usize, w: usize) -> Result<Self> {
        check_dims(h, w)?;
        Ok(Self::from_perm(ScanPattern::Raster, h, w, (0..h * w).collect()))
    }

    /// Serpentine starting left to right on row 0.
    pub fn zigzag(h: usize, w: usize) -> Result<Self> {
        Self::zigzag_with(h, w, false)
    }

    /// Serpentine; `right_to_left_first` flips the direction of every row.
    pub fn zigzag_with(h: usize, w: usize, right_to_left_first: bool) -> Result<Self> {
        check_dims(h, w)?;
        let mut perm = Vec::with_capacity(h * w);
        for r in 0..h {
            let reversed = (r % 2 == 1) != right_to_left_first;
            for k in 0..w {
                let c = if reversed { w - 1 - k } else { k };
                perm.push(r * w + c);
            }
        }
        Ok(Self::from_perm(ScanPattern::Zigzag, h, w, perm))
    }

    pub fn new(pattern: ScanPattern, h: usize, w: usize) -> Result<Self> {
        match pattern {
            ScanPattern::Raster => Self::raster(h, w),
            ScanPattern::Zigzag => Self::zigzag(h, w),
        }
    }

    pub fn pattern(&self) -> ScanPattern {
        self.pattern
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    /// `(row, col)` visited at sequence position `t`.
    pub fn cell(&self, t: usize) -> (usize, usize) {
        let i = self.perm[t];
        (i / self.w, i % self.w)
    }

    fn check_grid(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.h || shape[1] != self.w {
            return Err(Error::ShapeMismatch {
                op: "serialize",
                lhs: shape.to_vec(),
                rhs: vec![self.h, self.w],
            });
        }
        Ok(())
    }

    fn check_seq(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[0] != self.len() {
            return Err(Error::ShapeMismatch {
                op: "deserialize",
                lhs: shape.to_vec(),
                rhs: vec![self.len()],
            });
        }
        Ok(())
    }

    /// `[H, W, C]` to `[L, C]`.
    pub fn serialize<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_grid(x.shape())?;
        Ok(permute_rows(x.data(), x.shape()[2], &self.perm, vec![self.len(), x.shape()[2]]))
    }

    /// `[L, C]` back to `[H, W, C]`.
    pub fn deserialize<T: Element>(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_seq(seq.shape())?;
        let c = seq.shape()[1];
        Ok(permute_rows(seq.data(), c, &self.inv, vec![self.h, self.w, c]))
    }

    pub fn serialize_var<T: Element>(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check_grid(x.shape())?;
        let c = x.shape()[2];
        x.reshape([self.len(), c])?.gather_rows(Arc::clone(&self.perm))
    }

    pub fn deserialize_var<T: Element>(&self, seq: &Var<T>) -> Result<Var<T>> {
        self.check_seq(seq.shape())?;
        let c = seq.shape()[1];
        seq.gather_rows(Arc::clone(&self.inv))?.reshape([self.h, self.w, c])
    }

    /// Reorders a per-cell field (such as distances) into sequence order.
    pub fn serialize_field<F: Copy>(&self, field: &[F]) -> Result<Vec<F>> {
        if field.len() != self.len() {
            return Err(Error::DataLength {
                shape: vec![self.h, self.w],
                len: field.len(),
            });
        }
        Ok(self.perm.iter().map(|&i| field[i]).collect())
    }
}

fn permute_rows<T: Element>(src: &[T], width: usize, index: &[usize], shape: Vec<usize>) -> Tensor<T> {
    let mut out = Vec::with_capacity(src.len());
    for &r in index {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    Tensor::from_parts(shape, out)
}
