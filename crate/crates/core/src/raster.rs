//! Dense row-major rasters: depth, semantic labels, masks and intensities.

use crate::error::{Error, Result};
use crate::geom::Pixel;

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} raster needs {} values, got {len}",
            width * height
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_size(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Bilinear interpolation stencil around a continuous pixel coordinate.
///
/// Taps are ordered (u0,v0), (u0+1,v0), (u0,v0+1), (u0+1,v0+1). `du`/`dv`
/// hold the derivative of each tap weight with respect to u and v.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub du: [f64; 4],
    pub dv: [f64; 4],
}

impl Bilinear {
    /// Stencil for `(u, v)` inside `[0, w-1] x [0, h-1]`, `None` outside.
    pub fn at(u: f64, v: f64, width: usize, height: usize) -> Option<Self> {
        if width < 2 || height < 2 {
            return None;
        }
        let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= wmax && v <= hmax) {
            return None;
        }
        let u0 = (u.floor() as usize).min(width - 2);
        let v0 = (v.floor() as usize).min(height - 2);
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let i = v0 * width + u0;
        Some(Self {
            idx: [i, i + 1, i + width, i + width + 1],
            w: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
            du: [-(1.0 - fv), 1.0 - fv, -fv, fv],
            dv: [-(1.0 - fu), -fu, 1.0 - fu, fu],
        })
    }

    pub fn sample(&self, data: &[f64]) -> f64 {
        self.w[0] * data[self.idx[0]]
            + self.w[1] * data[self.idx[1]]
            + self.w[2] * data[self.idx[2]]
            + self.w[3] * data[self.idx[3]]
    }

    /// Spatial gradient `(d/du, d/dv)` of the interpolated value.
    pub fn gradient(&self, data: &[f64]) -> (f64, f64) {
        let mut gu = 0.0;
        let mut gv = 0.0;
        for k in 0..4 {
            gu += self.du[k] * data[self.idx[k]];
            gv += self.dv[k] * data[self.idx[k]];
        }
        (gu, gv)
    }
}

/// Per-pixel depth in meters; `0.0` marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some(bad) = values.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidDepth(*bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width * height],
        }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        debug_assert!(d.is_finite() && d >= 0.0);
        self.values[y * self.width + x] = d;
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|d| **d > 0.0).count()
    }

    /// Bilinear depth; `None` when outside the image or any tap is invalid.
    pub fn sample(&self, p: Pixel) -> Option<f64> {
        let b = Bilinear::at(p.u, p.v, self.width, self.height)?;
        if b.idx.iter().any(|&i| self.values[i] <= 0.0) {
            return None;
        }
        Some(b.sample(&self.values))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&d| if d > 0.0 { f(d) } else { 0.0 }).collect(),
        }
    }
}

/// Semantic labels with optional instance ids; label 0 is unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    instances: Option<Vec<u16>>,
}

impl SegMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>, instances: Option<Vec<u16>>) -> Result<Self> {
        check_len(width, height, labels.len())?;
        if let Some(inst) = &instances {
            check_len(width, height, inst.len())?;
        }
        Ok(Self {
            width,
            height,
            labels,
            instances,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn instances(&self) -> Option<&[u16]> {
        self.instances.as_deref()
    }

    pub fn label(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Label at the nearest pixel, `None` outside the image.
    pub fn label_at(&self, p: Pixel) -> Option<u16> {
        let (x, y) = p.rounded();
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        Some(self.label(x as usize, y as usize))
    }
}

/// Per-pixel weights in `[0, 1]`; 1 keeps a pixel, 0 excludes it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl MaskMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some(bad) = values.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::InvalidArgument(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mask value at the nearest pixel, `None` outside the image.
    pub fn at(&self, p: Pixel) -> Option<f64> {
        let (x, y) = p.rounded();
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        Some(self.get(x as usize, y as usize))
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|m| **m == 0.0).count()
    }
}

/// Intensity image normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite intensity".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sample(&self, p: Pixel) -> Option<f64> {
        Bilinear::at(p.u, p.v, self.width, self.height).map(|b| b.sample(&self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_is_exact_at_pixel_centers() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64).sqrt()).collect();
        for y in 0..3 {
            for x in 0..4 {
                let b = Bilinear::at(x as f64, y as f64, 4, 3).unwrap();
                assert_eq!(b.sample(&data), data[y * 4 + x]);
            }
        }
        assert!(Bilinear::at(3.0001, 0.0, 4, 3).is_none());
        assert!(Bilinear::at(-1e-12, 0.0, 4, 3).is_none());
    }

    #[test]
    fn bilinear_reproduces_affine_functions() {
        let data: Vec<f64> = (0..20).map(|i| 2.0 * (i % 5) as f64 - 0.5 * (i / 5) as f64 + 1.0).collect();
        let b = Bilinear::at(2.3, 1.7, 5, 4).unwrap();
        assert!((b.sample(&data) - (2.0 * 2.3 - 0.5 * 1.7 + 1.0)).abs() < 1e-12);
        let (gu, gv) = b.gradient(&data);
        assert!((gu - 2.0).abs() < 1e-12 && (gv + 0.5).abs() < 1e-12);
    }

    #[test]
    fn depth_sampling_rejects_invalid_taps() {
        let mut d = DepthMap::constant(3, 3, 2.0);
        d.set(1, 1, 0.0);
        assert_eq!(d.sample(Pixel::new(0.5, 0.5)), None);
        assert_eq!(d.sample(Pixel::new(0.0, 0.0)), None);
        let d = DepthMap::constant(3, 3, 2.0);
        assert_eq!(d.sample(Pixel::new(1.5, 0.25)), Some(2.0));
    }

    #[test]
    fn constructors_validate() {
        assert!(DepthMap::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DepthMap::new(1, 1, vec![f64::NAN]).is_err());
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
        assert!(MaskMap::new(1, 1, vec![1.5]).is_err());
        assert!(SegMap::new(2, 1, vec![1, 2], Some(vec![1])).is_err());
    }
}
