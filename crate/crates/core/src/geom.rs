//! Raster and point-cloud containers shared by every stage.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageKind {
    Depth,
    Normal,
    Color,
    Feature,
    Mask,
}

/// Row-major floating raster with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomImage {
    width: usize,
    height: usize,
    channels: usize,
    kind: ImageKind,
    data: Vec<f64>,
}

impl GeomImage {
    pub fn new(width: usize, height: usize, channels: usize, kind: ImageKind) -> Self {
        Self::filled(width, height, channels, kind, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, kind: ImageKind, value: f64) -> Self {
        assert!(channels > 0, "raster needs at least one channel");
        Self {
            width,
            height,
            channels,
            kind,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        kind: ImageKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("raster needs at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        let img = Self {
            width,
            height,
            channels,
            kind,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    /// Checks the per-kind invariants (unit normals, binary masks).
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ImageKind::Mask => {
                if let Some(v) = self.data.iter().find(|v| **v != 0.0 && **v != 1.0) {
                    return Err(Error::invalid(format!("mask value {v} is not 0 or 1")));
                }
            }
            ImageKind::Normal => {
                if self.channels != 3 {
                    return Err(Error::invalid("normal map must have 3 channels"));
                }
                for px in self.data.chunks_exact(3) {
                    let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
                    // all-zero pixels mark invalid normals
                    if n != 0.0 && (n - 1.0).abs() > 1e-5 {
                        return Err(Error::invalid(format!("normal with norm {n} is not unit length")));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: ImageKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
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

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y) + c;
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &GeomImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &GeomImage, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {}x{}x{} does not match {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Mask convenience: true where the single-channel value is nonzero.
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0.0
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

/// 3D points laid out on the pixel grid they originate from.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPointCloud {
    width: usize,
    height: usize,
    positions: Vec<Vec3>,
    valid: Vec<bool>,
}

impl GridPointCloud {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            positions: vec![Vec3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn new(width: usize, height: usize, positions: Vec<Vec3>, valid: Vec<bool>) -> Result<Self> {
        if positions.len() != width * height || valid.len() != width * height {
            return Err(Error::invalid(format!(
                "grid cloud buffers do not match {width}x{height}"
            )));
        }
        for (p, _) in positions.iter().zip(&valid).filter(|(_, v)| **v) {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid("valid grid cell carries a non-finite position"));
            }
        }
        Ok(Self {
            width,
            height,
            positions,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn position(&self, cell: usize) -> Vec3 {
        self.positions[cell]
    }

    pub fn is_valid(&self, cell: usize) -> bool {
        self.valid[cell]
    }

    pub fn set(&mut self, cell: usize, p: Vec3) {
        self.positions[cell] = p;
        self.valid[cell] = true;
    }

    pub fn invalidate(&mut self, cell: usize) {
        self.valid[cell] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// (cell index, position) for every valid cell in grid order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, Vec3)> + '_ {
        self.positions
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, v))| **v)
            .map(|(i, (p, _))| (i, *p))
    }

    pub(crate) fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.valid_count() == 0 {
            Err(Error::invalid(format!("{what}: point cloud has no valid cells")))
        } else {
            Ok(())
        }
    }
}

/// Expression basis vector (source or driving).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpressionCoeffs(pub Vec<f64>);

pub const DEFAULT_EXPRESSION_DIM: usize = 64;

impl ExpressionCoeffs {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.0.len() != dim {
            return Err(Error::invalid(format!(
                "expression vector has dimension {}, expected {dim}",
                self.0.len()
            )));
        }
        if !self.0.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("expression vector is not finite"));
        }
        Ok(())
    }
}
