//! Dense planar tensors in `(batch, channels, height, width)` order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, row-major `(N, C, H, W)` volume of `f64` values.
///
/// Images are stored with values in the unit interval; feature maps are
/// unconstrained. Scalars are represented as `1×1×1×1` tensors.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, [b, c, y, x]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let i = self.index(idx);
        self.data[i] = value;
    }

    /// The contiguous `H×W` plane of channel `c` in batch item `b`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.plane_len();
        let start = (b * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `b`, contiguous.
    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn to_scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar: {:?}", self.shape);
        self.data[0]
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape[1] * self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Input(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape, shape
            )));
        }
        Ok(())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Input(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Extracts batch item `b` as a single-item tensor.
    pub fn select(&self, b: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self {
            shape: [1, c, h, w],
            data: self.item(b).to_vec(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        if parts
            .iter()
            .any(|p| p.shape[0] != n || p.shape[2] != h || p.shape[3] != w)
        {
            return Err(Error::Input("channel concat needs equal N, H, W".into()));
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copies the window `[y0, y0+h) × [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let [n, c, hs, ws] = self.shape;
        if y0 + h > hs || x0 + w > ws {
            return Err(Error::Input(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {hs}x{ws}"
            )));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                let plane = self.plane(b, ch);
                for y in y0..y0 + h {
                    data.extend_from_slice(&plane[y * ws + x0..y * ws + x0 + w]);
                }
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Mirror-pads the bottom and right edges (without repeating the edge
    /// sample) up to `(h, w)`.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> Result<Self> {
        let [n, c, hs, ws] = self.shape;
        if h < hs || w < ws {
            return Err(Error::Input("reflect pad cannot shrink".into()));
        }
        if (h > hs && h - hs >= hs) || (w > ws && w - ws >= ws) {
            return Err(Error::Input(format!(
                "reflect padding {hs}x{ws} to {h}x{w} exceeds the image"
            )));
        }
        let reflect = |i: usize, len: usize| if i < len { i } else { 2 * len - 2 - i };
        Ok(Self::from_fn([n, c, h, w], |[b, ch, y, x]| {
            self.at([b, ch, reflect(y, hs), reflect(x, ws)])
        }))
    }

    /// Little-endian byte image of the values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: [usize; 4], bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Format(
                "tensor byte length not a multiple of 8".into(),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_pad_shapes() {
        let t = Tensor::from_fn([1, 2, 5, 6], |[_, c, y, x]| (c * 100 + y * 10 + x) as f64);
        let p = t.reflect_pad_to(8, 8).unwrap();
        assert_eq!(p.shape(), [1, 2, 8, 8]);
        // row 5 mirrors row 3, column 6 mirrors column 4
        assert_eq!(p.at([0, 1, 5, 0]), t.at([0, 1, 3, 0]));
        assert_eq!(p.at([0, 0, 0, 6]), t.at([0, 0, 0, 4]));
        let c = p.crop(0, 0, 5, 6).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn concat_and_stack() {
        let a = Tensor::full([2, 1, 2, 2], 1.0);
        let b = Tensor::full([2, 2, 2, 2], 2.0);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [2, 3, 2, 2]);
        assert_eq!(c.at([1, 0, 1, 1]), 1.0);
        assert_eq!(c.at([1, 2, 0, 0]), 2.0);
        let s = Tensor::stack(&[a.select(0), a.select(1)]).unwrap();
        assert_eq!(s, a);
    }

    #[test]
    fn byte_round_trip() {
        let t = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| {
            (y as f64).sin() + x as f64 * 1e-9
        });
        let back = Tensor::from_le_bytes(t.shape(), &t.to_le_bytes()).unwrap();
        assert_eq!(back, t);
    }
}
